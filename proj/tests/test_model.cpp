#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <numbers>

#include "bindlab/error.hpp"
#include "bindlab/model.hpp"
#include "bindlab/tasks.hpp"
#include "bindlab/tensor_archive.hpp"
#include "bindlab/tolerances.hpp"

using namespace bindlab;
namespace fs = std::filesystem;

namespace {

ModelParams tiny_model(std::uint64_t seed, std::size_t layers = 2, std::size_t d = 16, std::size_t heads = 2,
                       std::size_t vocab = 40) {
  ModelConfig c;
  c.n_layers = layers;
  c.d_model = d;
  c.n_heads = heads;
  c.d_mlp = 2 * d;
  c.vocab_size = vocab;
  c.max_positions = 48;
  SeededRng rng(seed);
  return ModelParams::init(c, rng);
}

std::vector<Token> random_tokens(SeededRng& rng, std::size_t n, std::size_t vocab) {
  std::vector<Token> t(n);
  for (auto& x : t) x = static_cast<Token>(rng.uniform_index(vocab));
  return t;
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  REQUIRE(a.size() == b.size());
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

fs::path temp_file(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "bindlab_tests";
  fs::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST_CASE("ModelConfig validation") {
  ModelConfig c;
  c.vocab_size = 10;
  CHECK_NOTHROW(c.validate());
  c.n_heads = 3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c.n_heads = 4;
  c.d_model = 12;  // d_head 3 is odd
  CHECK_THROWS_AS(c.validate(), ConfigError);
  ModelConfig d;
  d.vocab_size = 7;
  CHECK(ModelConfig::from_json(d.to_json()) == d);
}

TEST_CASE("rope_rotate") {
  SeededRng rng(1);
  Vector v(8);
  for (std::size_t i = 0; i < 8; ++i) v[i] = rng.normal();
  CHECK(rope_rotate(v, 0.0, 10000.0) == v);
  for (double m : {1.0, 5.0, 63.0, 1000.0}) {
    CHECK(std::abs(rope_rotate(v, m, 10000.0).norm() - v.norm()) <= tol::kAlgebraic);
  }
  // d = 2: the single pair turns by m radians.
  const Vector r = rope_rotate(Vector{1.0, 0.0}, std::numbers::pi / 2.0, 10000.0);
  CHECK(std::abs(r[0]) <= tol::kAlgebraic);
  CHECK(std::abs(r[1] - 1.0) <= tol::kAlgebraic);
  CHECK_THROWS_AS(rope_rotate(Vector{1.0, 2.0, 3.0}, 1.0, 10000.0), ConfigError);
}

TEST_CASE("property: rotary scores depend only on relative position") {
  SeededRng rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    Vector q(16), k(16);
    for (std::size_t i = 0; i < 16; ++i) {
      q[i] = rng.normal();
      k[i] = rng.normal();
    }
    const double m = static_cast<double>(rng.uniform_index(40));
    const double n = static_cast<double>(rng.uniform_index(40));
    const double c = static_cast<double>(rng.uniform_index(40));
    const double a = rope_rotate(q, m, 10000.0).dot(rope_rotate(k, n, 10000.0));
    const double b = rope_rotate(q, m + c, 10000.0).dot(rope_rotate(k, n + c, 10000.0));
    CHECK(std::abs(a - b) <= tol::kAlgebraic * 100);
  }
}

TEST_CASE("forward shapes, errors and determinism") {
  const ModelParams p = tiny_model(3);
  SeededRng rng(4);
  const auto toks = random_tokens(rng, 12, 40);
  const ActivationRecord a = forward(p, toks);
  CHECK(a.n_tokens() == 12);
  CHECK(a.residuals[0].rows() == 2);
  CHECK(a.residuals[0].cols() == 16);
  CHECK(a.logits.rows() == 12);
  CHECK(a.logits.cols() == 40);
  // Layer-0 input is the token embedding.
  CHECK(a.residual(0, 3) == p.embed.row_vector(static_cast<std::size_t>(toks[3])));
  const ActivationRecord b = forward(p, toks);
  CHECK(a.logits == b.logits);
  CHECK(a.residuals == b.residuals);
  CHECK(forward(p, toks, PositionMap::identity(12)).logits == a.logits);

  std::vector<Token> bad = toks;
  bad[2] = 40;
  CHECK_THROWS_AS(forward(p, bad), InputError);
  CHECK_THROWS_AS(forward(p, random_tokens(rng, 49, 40)), InputError);
}

TEST_CASE("property: causality") {
  const ModelParams p = tiny_model(5);
  SeededRng rng(6);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t n = 4 + rng.uniform_index(20);
    auto toks = random_tokens(rng, n, 40);
    const auto base = forward(p, toks);
    const std::size_t cut = rng.uniform_index(n - 1);
    for (std::size_t j = cut + 1; j < n; ++j) toks[j] = static_cast<Token>(rng.uniform_index(40));
    const auto changed = forward(p, toks);
    for (std::size_t t = 0; t <= cut; ++t) {
      CHECK(max_abs_diff(base.logits.row(t), changed.logits.row(t)) <= tol::kAlgebraic);
    }
  }
}

TEST_CASE("property: constant position offsets leave logits unchanged") {
  const ModelParams p = tiny_model(7);
  SeededRng rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    const auto toks = random_tokens(rng, 10, 40);
    PositionMap shifted = PositionMap::identity(10);
    const std::size_t c = 1 + rng.uniform_index(30);
    for (auto& x : shifted.apparent) x += c;
    CHECK(max_abs_diff(forward(p, toks).logits.values(), forward(p, toks, shifted).logits.values()) <=
          tol::kRopeShift);
  }
}

TEST_CASE("property: swapping two tokens with their positions") {
  const ModelParams p = tiny_model(9, 3);
  SeededRng rng(10);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 8 + rng.uniform_index(10);
    const auto toks = random_tokens(rng, n, 40);
    const std::size_t i = rng.uniform_index(n - 3);
    const std::size_t j = i + 1 + rng.uniform_index(n - 2 - i - 1);
    auto swapped = toks;
    std::swap(swapped[i], swapped[j]);
    PositionMap pm = PositionMap::identity(n);
    std::swap(pm.apparent[i], pm.apparent[j]);
    const auto a = forward(p, toks);
    const auto b = forward(p, swapped, pm);
    for (std::size_t t = j + 1; t < n; ++t) CHECK(max_abs_diff(a.logits.row(t), b.logits.row(t)) <= tol::kLogit);
  }
}

TEST_CASE("forward_intervened identity suite") {
  SeededRng rng(11);
  const ModelParams p = tiny_model(12);
  for (int trial = 0; trial < 10; ++trial) {
    const auto ctx = random_tokens(rng, 10, 40);
    const auto query = random_tokens(rng, 4, 40);
    std::vector<Token> all = ctx;
    all.insert(all.end(), query.begin(), query.end());
    const auto full = forward(p, all);
    const auto base = forward(p, ctx);

    const auto empty = forward_intervened(p, ctx, base, {}, query);
    CHECK(max_abs_diff(empty.logits.values(), full.logits.values()) <= tol::kLogit);

    const ZContext z = capture_zcontext(base, ctx);
    InterventionSpec self;
    const std::size_t b = rng.uniform_index(8);
    self.substitute_from({b, 2}, z, {b, 2});
    self.remap({0, 10}, 0);
    const auto same = forward_intervened(p, ctx, base, self, query);
    CHECK(max_abs_diff(same.logits.values(), full.logits.values()) <= tol::kLogit);
  }
}

TEST_CASE("total substitution equals the source run") {
  SeededRng rng(13);
  const ModelParams p = tiny_model(14);
  const auto ctx = random_tokens(rng, 9, 40);
  const auto src = random_tokens(rng, 9, 40);
  const auto query = random_tokens(rng, 3, 40);
  const auto base = forward(p, ctx);
  const auto src_run = forward(p, src);
  InterventionSpec spec;
  spec.substitute_from({0, 9}, capture_zcontext(src_run, src), {0, 9});
  const auto patched = forward_intervened(p, ctx, base, spec, query);
  std::vector<Token> all = src;
  all.insert(all.end(), query.begin(), query.end());
  const auto direct = forward(p, all);
  for (std::size_t t = 9; t < 12; ++t) CHECK(max_abs_diff(patched.logits.row(t), direct.logits.row(t)) <= tol::kLogit);
}

TEST_CASE("forward_intervened rejects bad targets") {
  SeededRng rng(15);
  const ModelParams p = tiny_model(16);
  const auto ctx = random_tokens(rng, 6, 40);
  const auto base = forward(p, ctx);
  const std::vector<Token> query = {1, 2};
  InterventionSpec outside;
  outside.offset({5, 2}, LayerStack(2, 16));
  CHECK_THROWS_AS(forward_intervened(p, ctx, base, outside, query), InterventionError);
  InterventionSpec layers;
  layers.substitute({0, 1}, {LayerStack(2, 16)}, LayerRange{1, 5});
  CHECK_THROWS_AS(forward_intervened(p, ctx, base, layers, query), InterventionError);
}

TEST_CASE("checkpoint round trip and validation") {
  const ModelParams p = tiny_model(17);
  std::vector<std::string> words;
  for (int i = 0; i < 40; ++i) words.push_back("w" + std::to_string(i));
  const Vocabulary vocab(words);
  const fs::path path = temp_file("model.ckpt");
  save_checkpoint(path, p, vocab, {{"note", "x"}});
  const LoadedModel back = load_checkpoint(path);
  CHECK(back.params == p);
  CHECK(back.vocab_words == words);
  CHECK(back.meta["extra"]["note"] == "x");

  // A tensor with the wrong shape is rejected.
  TensorArchive a = read_archive(path);
  a.tensors[0].shape = {a.tensors[0].data.size()};
  write_archive(path, a);
  CHECK_THROWS_AS(load_checkpoint(path), FormatError);

  // Truncated files are rejected.
  save_checkpoint(path, p, vocab);
  fs::resize_file(path, fs::file_size(path) - 9);
  CHECK_THROWS_AS(read_archive(path), FormatError);
}

TEST_CASE("parameter validation") {
  ModelParams p = tiny_model(18);
  CHECK_NOTHROW(p.validate());
  p.layers[1].wq(0, 0) = std::nan("");
  CHECK_THROWS_AS(p.validate(), NumericError);
  ModelParams q = tiny_model(18);
  q.layers.pop_back();
  CHECK_THROWS_AS(q.validate(), ConfigError);
}
