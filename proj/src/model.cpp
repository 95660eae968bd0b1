#include "bindlab/model.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "bindlab/error.hpp"
#include "bindlab/tensor_archive.hpp"

namespace bindlab {

namespace {

constexpr double kRmsEps = 1e-6;

// ---------------------------------------------------------------- kernels
// All reductions run in ascending index order; inner loops are axpy-shaped
// so they vectorize without reassociation.

// C[m][n] += sum_k A(m, k) * B[k][n] with A(m, k) = a[m * am + k * ak].
// Every element is summed in ascending k, one multiply and one add per
// term, so blocking never changes results. Tiles of 4 x 16 stay in
// registers across the k loop.
void gemm_acc(double* c, std::size_t ldc, std::size_t M, std::size_t N, std::size_t K, const double* a,
              std::size_t am, std::size_t ak, const double* b, std::size_t ldb) {
  constexpr std::size_t MR = 4, NR = 16;
  std::size_t m = 0;
  for (; m + MR <= M; m += MR) {
    std::size_t n = 0;
    for (; n + NR <= N; n += NR) {
      double c0[NR], c1[NR], c2[NR], c3[NR];
      for (std::size_t j = 0; j < NR; ++j) {
        c0[j] = c[m * ldc + n + j];
        c1[j] = c[(m + 1) * ldc + n + j];
        c2[j] = c[(m + 2) * ldc + n + j];
        c3[j] = c[(m + 3) * ldc + n + j];
      }
      const double* a0 = a + m * am;
      for (std::size_t k = 0; k < K; ++k) {
        const double* __restrict bk = b + k * ldb + n;
        const double v0 = a0[k * ak], v1 = a0[am + k * ak], v2 = a0[2 * am + k * ak], v3 = a0[3 * am + k * ak];
        for (std::size_t j = 0; j < NR; ++j) {
          const double bv = bk[j];
          c0[j] += v0 * bv;
          c1[j] += v1 * bv;
          c2[j] += v2 * bv;
          c3[j] += v3 * bv;
        }
      }
      for (std::size_t j = 0; j < NR; ++j) {
        c[m * ldc + n + j] = c0[j];
        c[(m + 1) * ldc + n + j] = c1[j];
        c[(m + 2) * ldc + n + j] = c2[j];
        c[(m + 3) * ldc + n + j] = c3[j];
      }
    }
    for (; n < N; ++n) {
      for (std::size_t r = 0; r < MR; ++r) {
        double acc = c[(m + r) * ldc + n];
        for (std::size_t k = 0; k < K; ++k) acc += a[(m + r) * am + k * ak] * b[k * ldb + n];
        c[(m + r) * ldc + n] = acc;
      }
    }
  }
  for (; m < M; ++m) {
    double* cm = c + m * ldc;
    for (std::size_t k = 0; k < K; ++k) {
      const double av = a[m * am + k * ak];
      const double* bk = b + k * ldb;
      for (std::size_t n = 0; n < N; ++n) cm[n] += av * bk[n];
    }
  }
}

// y[T x out] = x[T x in] * W[in x out]
void matmul(const double* x, std::size_t rows, std::size_t in, const double* w, std::size_t out,
            double* y) {
  std::fill(y, y + rows * out, 0.0);
  gemm_acc(y, out, rows, out, in, x, in, 1, w, out);
}

// dW[in x out] += x^T dy
void matmul_grad_w(const double* x, std::size_t rows, std::size_t in, const double* dy,
                   std::size_t out, double* dw) {
  gemm_acc(dw, out, in, out, rows, x, 1, in, dy, out);
}

// dx[T x in] += dy[T x out] * W^T, using wt = W^T laid out [out x in].
void matmul_grad_x(const double* dy, std::size_t rows, std::size_t out, const double* wt,
                   std::size_t in, double* dx) {
  gemm_acc(dx, in, rows, in, out, dy, out, 1, wt, in);
}

std::vector<double> transpose(const Matrix& m) {
  std::vector<double> t(m.size());
  for (std::size_t r = 0; r < m.rows(); ++r) {
    for (std::size_t c = 0; c < m.cols(); ++c) t[c * m.rows() + r] = m(r, c);
  }
  return t;
}

// y = g * x / rms(x) per row; returns inverse rms per row in inv.
void rmsnorm(const double* x, std::size_t rows, std::size_t d, const double* g, double* y, double* inv) {
  for (std::size_t t = 0; t < rows; ++t) {
    const double* xt = x + t * d;
    double ss = 0.0;
    for (std::size_t i = 0; i < d; ++i) ss += xt[i] * xt[i];
    const double r = 1.0 / std::sqrt(ss / static_cast<double>(d) + kRmsEps);
    inv[t] = r;
    double* yt = y + t * d;
    for (std::size_t i = 0; i < d; ++i) yt[i] = g[i] * xt[i] * r;
  }
}

// dx += d(rmsnorm)/dx^T dy ; dg += dy * x * r
void rmsnorm_backward(const double* x, const double* inv, std::size_t rows, std::size_t d,
                      const double* g, const double* dy, double* dx, double* dg) {
  for (std::size_t t = 0; t < rows; ++t) {
    const double* xt = x + t * d;
    const double* dyt = dy + t * d;
    const double r = inv[t];
    double dot_xg = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      dg[i] += dyt[i] * xt[i] * r;
      dot_xg += dyt[i] * g[i] * xt[i];
    }
    const double coef = r * r * r * dot_xg / static_cast<double>(d);
    double* dxt = dx + t * d;
    for (std::size_t i = 0; i < d; ++i) dxt[i] += r * dyt[i] * g[i] - coef * xt[i];
  }
}

double sigmoid(double u) { return 1.0 / (1.0 + std::exp(-u)); }

struct RopeTable {
  std::size_t half = 0;
  std::vector<double> cos, sin;  // [T x half]

  RopeTable(std::span<const std::size_t> positions, std::size_t d_head, double base) : half(d_head / 2) {
    cos.resize(positions.size() * half);
    sin.resize(positions.size() * half);
    for (std::size_t t = 0; t < positions.size(); ++t) {
      for (std::size_t i = 0; i < half; ++i) {
        const double freq = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(d_head));
        const double angle = static_cast<double>(positions[t]) * freq;
        cos[t * half + i] = std::cos(angle);
        sin[t * half + i] = std::sin(angle);
      }
    }
  }

  // Rotates every head of row t in place; inverse=true applies R^T.
  void rotate_row(double* row, std::size_t t, std::size_t n_heads, std::size_t d_head, bool inverse) const {
    const double* c = cos.data() + t * half;
    const double* s = sin.data() + t * half;
    for (std::size_t h = 0; h < n_heads; ++h) {
      double* v = row + h * d_head;
      for (std::size_t i = 0; i < half; ++i) {
        const double x0 = v[2 * i];
        const double x1 = v[2 * i + 1];
        const double sn = inverse ? -s[i] : s[i];
        v[2 * i] = x0 * c[i] - x1 * sn;
        v[2 * i + 1] = x0 * sn + x1 * c[i];
      }
    }
  }
};

}  // namespace

// ---------------------------------------------------------------- config

void ModelConfig::validate() const {
  if (n_layers == 0 || d_model == 0 || n_heads == 0 || d_mlp == 0 || vocab_size == 0 || max_positions == 0) {
    throw ConfigError("ModelConfig: all sizes must be positive");
  }
  if (d_model % n_heads != 0) throw ConfigError("ModelConfig: d_model must be divisible by n_heads");
  if (d_head() % 2 != 0) throw ConfigError("ModelConfig: d_head must be even for rotary embeddings");
  if (!(rope_base > 0.0)) throw ConfigError("ModelConfig: rope_base must be positive");
}

nlohmann::json ModelConfig::to_json() const {
  return {{"n_layers", n_layers},   {"d_model", d_model},       {"n_heads", n_heads},
          {"d_mlp", d_mlp},         {"vocab_size", vocab_size}, {"rope_base", rope_base},
          {"max_positions", max_positions}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.n_layers = j.value("n_layers", c.n_layers);
  c.d_model = j.value("d_model", c.d_model);
  c.n_heads = j.value("n_heads", c.n_heads);
  c.d_mlp = j.value("d_mlp", c.d_mlp);
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.rope_base = j.value("rope_base", c.rope_base);
  c.max_positions = j.value("max_positions", c.max_positions);
  return c;
}

// ---------------------------------------------------------------- params

namespace {

Matrix random_matrix(std::size_t rows, std::size_t cols, double stddev, SeededRng& rng) {
  Matrix m(rows, cols);
  for (double& x : m.values()) x = stddev * rng.normal();
  return m;
}

}  // namespace

ModelParams ModelParams::init(const ModelConfig& config, SeededRng& rng) {
  config.validate();
  ModelParams p;
  p.config = config;
  const std::size_t d = config.d_model;
  const double std_d = 1.0 / std::sqrt(static_cast<double>(d));
  const double std_f = 1.0 / std::sqrt(static_cast<double>(config.d_mlp));
  const double resid_scale = 1.0 / std::sqrt(2.0 * static_cast<double>(config.n_layers));
  p.embed = random_matrix(config.vocab_size, d, 1.0, rng);
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    LayerParams lp;
    lp.attn_gain = Vector(d, 1.0);
    lp.wq = random_matrix(d, d, std_d, rng);
    lp.wk = random_matrix(d, d, std_d, rng);
    lp.wv = random_matrix(d, d, std_d, rng);
    lp.wo = random_matrix(d, d, std_d * resid_scale, rng);
    lp.mlp_gain = Vector(d, 1.0);
    lp.w_in = random_matrix(d, config.d_mlp, std_d, rng);
    lp.w_out = random_matrix(config.d_mlp, d, std_f * resid_scale, rng);
    p.layers.push_back(std::move(lp));
  }
  p.final_gain = Vector(d, 1.0);
  p.unembed = random_matrix(d, config.vocab_size, std_d, rng);
  return p;
}

ModelParams ModelParams::zeros(const ModelConfig& config) {
  config.validate();
  ModelParams p;
  p.config = config;
  const std::size_t d = config.d_model;
  p.embed = Matrix(config.vocab_size, d);
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    LayerParams lp;
    lp.attn_gain = Vector(d);
    lp.wq = Matrix(d, d);
    lp.wk = Matrix(d, d);
    lp.wv = Matrix(d, d);
    lp.wo = Matrix(d, d);
    lp.mlp_gain = Vector(d);
    lp.w_in = Matrix(d, config.d_mlp);
    lp.w_out = Matrix(config.d_mlp, d);
    p.layers.push_back(std::move(lp));
  }
  p.final_gain = Vector(d);
  p.unembed = Matrix(d, config.vocab_size);
  return p;
}

void ModelParams::for_each_tensor(const std::function<void(const std::string&, std::span<double>, bool)>& f) {
  f("embed", embed.values(), true);
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const std::string pre = "layers." + std::to_string(l) + ".";
    auto& lp = layers[l];
    f(pre + "attn_gain", lp.attn_gain.values(), false);
    f(pre + "wq", lp.wq.values(), true);
    f(pre + "wk", lp.wk.values(), true);
    f(pre + "wv", lp.wv.values(), true);
    f(pre + "wo", lp.wo.values(), true);
    f(pre + "mlp_gain", lp.mlp_gain.values(), false);
    f(pre + "w_in", lp.w_in.values(), true);
    f(pre + "w_out", lp.w_out.values(), true);
  }
  f("final_gain", final_gain.values(), false);
  f("unembed", unembed.values(), true);
}

void ModelParams::for_each_tensor(
    const std::function<void(const std::string&, std::span<const double>, bool)>& f) const {
  const_cast<ModelParams*>(this)->for_each_tensor(
      [&f](const std::string& name, std::span<double> v, bool decays) {
        f(name, std::span<const double>(v.data(), v.size()), decays);
      });
}

std::size_t ModelParams::parameter_count() const {
  std::size_t n = 0;
  for_each_tensor([&n](const std::string&, std::span<const double> v, bool) { n += v.size(); });
  return n;
}

void ModelParams::validate() const {
  config.validate();
  const std::size_t d = config.d_model;
  const auto shape = [](const Matrix& m, std::size_t r, std::size_t c, const std::string& name) {
    if (m.rows() != r || m.cols() != c) throw ConfigError("ModelParams: bad shape for " + name);
  };
  shape(embed, config.vocab_size, d, "embed");
  if (layers.size() != config.n_layers) throw ConfigError("ModelParams: layer count mismatch");
  for (const auto& lp : layers) {
    if (lp.attn_gain.dim() != d || lp.mlp_gain.dim() != d) throw ConfigError("ModelParams: bad gain shape");
    shape(lp.wq, d, d, "wq");
    shape(lp.wk, d, d, "wk");
    shape(lp.wv, d, d, "wv");
    shape(lp.wo, d, d, "wo");
    shape(lp.w_in, d, config.d_mlp, "w_in");
    shape(lp.w_out, config.d_mlp, d, "w_out");
  }
  if (final_gain.dim() != d) throw ConfigError("ModelParams: bad final gain shape");
  shape(unembed, d, config.vocab_size, "unembed");
  for_each_tensor([](const std::string& name, std::span<const double> v, bool) {
    for (double x : v) {
      if (!std::isfinite(x)) throw NumericError("ModelParams: non-finite value in " + name);
    }
  });
}

// ---------------------------------------------------------------- rope

Vector rope_rotate(const Vector& v, double position, double base) {
  if (v.dim() % 2 != 0) throw ConfigError("rope_rotate: dimension must be even");
  const std::size_t d = v.dim();
  Vector out(d);
  for (std::size_t i = 0; i < d / 2; ++i) {
    const double freq = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(d));
    const double angle = position * freq;
    const double c = std::cos(angle);
    const double s = std::sin(angle);
    out[2 * i] = v[2 * i] * c - v[2 * i + 1] * s;
    out[2 * i + 1] = v[2 * i] * s + v[2 * i + 1] * c;
  }
  return out;
}

// ---------------------------------------------------------------- forward

struct LayerCache {
  std::vector<double> x, h, inv1, q, k, v, probs, o, x2, h2, inv2, u, act;
};

struct ForwardCache {
  std::size_t rows = 0;
  std::vector<Token> tokens;
  std::vector<std::size_t> positions;
  std::vector<LayerCache> layers;
  std::vector<double> x_final;
  std::vector<std::size_t> logit_rows;
  std::vector<double> hf, inv_f;  // logit rows only
  Matrix logits;
};

namespace {

void check_tokens(const ModelConfig& cfg, std::span<const Token> tokens) {
  if (tokens.size() > cfg.max_positions) {
    throw InputError("forward: " + std::to_string(tokens.size()) + " tokens exceed max_positions=" +
                     std::to_string(cfg.max_positions));
  }
  for (Token t : tokens) {
    if (t < 0 || static_cast<std::size_t>(t) >= cfg.vocab_size) {
      throw InputError("forward: token " + std::to_string(t) + " out of vocabulary");
    }
  }
}

// Core pass. `frozen` (optional) overrides the first frozen->length() rows of
// every layer input. `record` (optional) receives per-layer residuals.
// `keep` retains per-layer intermediates for backward.
void run_forward(const ModelParams& p, std::span<const Token> tokens, std::span<const std::size_t> positions,
                 const ZContext* frozen, std::span<const std::size_t> logit_rows, bool keep,
                 ForwardCache& cache, std::vector<LayerStack>* record) {
  const auto& cfg = p.config;
  const std::size_t T = tokens.size();
  const std::size_t D = cfg.d_model;
  const std::size_t F = cfg.d_mlp;
  const std::size_t H = cfg.n_heads;
  const std::size_t dh = cfg.d_head();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const RopeTable rope(positions, dh, cfg.rope_base);
  // Causal mask over apparent positions (index order breaks ties), so that
  // permuting tokens together with their positions permutes the computation.
  std::vector<std::vector<std::size_t>> visible(T);
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t s = 0; s < T; ++s) {
      if (positions[s] < positions[t] || (positions[s] == positions[t] && s <= t)) visible[t].push_back(s);
    }
  }

  cache.rows = T;
  cache.tokens.assign(tokens.begin(), tokens.end());
  cache.positions.assign(positions.begin(), positions.end());
  if (keep) cache.layers.assign(cfg.n_layers, LayerCache{});
  if (record) record->assign(T, LayerStack(cfg.n_layers, D));

  std::vector<double> x(T * D);
  for (std::size_t t = 0; t < T; ++t) {
    auto row = p.embed.row(static_cast<std::size_t>(tokens[t]));
    std::copy(row.begin(), row.end(), x.begin() + static_cast<std::ptrdiff_t>(t * D));
  }

  LayerCache scratch;
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const auto& lp = p.layers[l];
    LayerCache& c = keep ? cache.layers[l] : scratch;
    if (frozen) {
      for (std::size_t t = 0; t < frozen->length(); ++t) {
        auto src = frozen->residuals[t].row(l);
        std::copy(src.begin(), src.end(), x.begin() + static_cast<std::ptrdiff_t>(t * D));
      }
    }
    if (record) {
      for (std::size_t t = 0; t < T; ++t) {
        (*record)[t].set_row(l, std::span<const double>(x.data() + t * D, D));
      }
    }
    c.x = x;
    c.h.resize(T * D);
    c.inv1.resize(T);
    rmsnorm(x.data(), T, D, lp.attn_gain.values().data(), c.h.data(), c.inv1.data());
    c.q.resize(T * D);
    c.k.resize(T * D);
    c.v.resize(T * D);
    matmul(c.h.data(), T, D, lp.wq.values().data(), D, c.q.data());
    matmul(c.h.data(), T, D, lp.wk.values().data(), D, c.k.data());
    matmul(c.h.data(), T, D, lp.wv.values().data(), D, c.v.data());
    for (std::size_t t = 0; t < T; ++t) {
      rope.rotate_row(c.q.data() + t * D, t, H, dh, false);
      rope.rotate_row(c.k.data() + t * D, t, H, dh, false);
    }
    c.probs.assign(H * T * T, 0.0);
    c.o.assign(T * D, 0.0);
    for (std::size_t hd = 0; hd < H; ++hd) {
      for (std::size_t t = 0; t < T; ++t) {
        double* a = c.probs.data() + (hd * T + t) * T;
        const double* qt = c.q.data() + t * D + hd * dh;
        double mx = -1e300;
        for (std::size_t s : visible[t]) {
          const double* ks = c.k.data() + s * D + hd * dh;
          double acc = 0.0;
          for (std::size_t i = 0; i < dh; ++i) acc += qt[i] * ks[i];
          a[s] = acc * scale;
          mx = std::max(mx, a[s]);
        }
        double sum = 0.0;
        for (std::size_t s : visible[t]) {
          a[s] = std::exp(a[s] - mx);
          sum += a[s];
        }
        const double inv = 1.0 / sum;
        double* ot = c.o.data() + t * D + hd * dh;
        for (std::size_t s : visible[t]) {
          a[s] *= inv;
          const double* vs = c.v.data() + s * D + hd * dh;
          for (std::size_t i = 0; i < dh; ++i) ot[i] += a[s] * vs[i];
        }
      }
    }
    std::vector<double> attn(T * D);
    matmul(c.o.data(), T, D, lp.wo.values().data(), D, attn.data());
    for (std::size_t i = 0; i < T * D; ++i) x[i] += attn[i];
    c.x2 = x;
    c.h2.resize(T * D);
    c.inv2.resize(T);
    rmsnorm(x.data(), T, D, lp.mlp_gain.values().data(), c.h2.data(), c.inv2.data());
    c.u.resize(T * F);
    matmul(c.h2.data(), T, D, lp.w_in.values().data(), F, c.u.data());
    c.act.resize(T * F);
    for (std::size_t i = 0; i < T * F; ++i) c.act[i] = c.u[i] * sigmoid(c.u[i]);
    std::vector<double> mlp(T * D);
    matmul(c.act.data(), T, F, lp.w_out.values().data(), D, mlp.data());
    for (std::size_t i = 0; i < T * D; ++i) x[i] += mlp[i];
  }

  cache.x_final = x;
  const std::size_t R = logit_rows.size();
  cache.logit_rows.assign(logit_rows.begin(), logit_rows.end());
  std::vector<double> xr(R * D);
  for (std::size_t r = 0; r < R; ++r) {
    std::copy_n(x.begin() + static_cast<std::ptrdiff_t>(logit_rows[r] * D), D,
                xr.begin() + static_cast<std::ptrdiff_t>(r * D));
  }
  cache.hf.resize(R * D);
  cache.inv_f.resize(R);
  rmsnorm(xr.data(), R, D, p.final_gain.values().data(), cache.hf.data(), cache.inv_f.data());
  std::vector<double> logits(R * cfg.vocab_size);
  matmul(cache.hf.data(), R, D, p.unembed.values().data(), cfg.vocab_size, logits.data());
  cache.logits = Matrix(R, cfg.vocab_size, std::move(logits));
}

std::vector<std::size_t> all_rows(std::size_t n) {
  std::vector<std::size_t> rows(n);
  for (std::size_t i = 0; i < n; ++i) rows[i] = i;
  return rows;
}

}  // namespace

ActivationRecord forward(const ModelParams& params, std::span<const Token> tokens, const PositionMap& positions) {
  check_tokens(params.config, tokens);
  if (positions.size() != tokens.size()) throw InputError("forward: position map length mismatch");
  ForwardCache cache;
  ActivationRecord rec;
  run_forward(params, tokens, positions.apparent, nullptr, all_rows(tokens.size()), false, cache, &rec.residuals);
  rec.logits = std::move(cache.logits);
  return rec;
}

ActivationRecord forward(const ModelParams& params, std::span<const Token> tokens) {
  return forward(params, tokens, PositionMap::identity(tokens.size()));
}

ActivationRecord forward_frozen(const ModelParams& params, const ZContext& context,
                                std::span<const Token> query_tokens) {
  const auto& cfg = params.config;
  context.check();
  if (context.n_layers() != cfg.n_layers || context.d_model() != cfg.d_model) {
    throw InterventionError("forward_frozen: context shape does not match the model");
  }
  std::vector<Token> tokens = context.tokens;
  if (tokens.size() != context.length()) throw InterventionError("forward_frozen: context token count mismatch");
  tokens.insert(tokens.end(), query_tokens.begin(), query_tokens.end());
  check_tokens(cfg, tokens);
  std::vector<std::size_t> positions = context.position_map.apparent;
  for (std::size_t j = 0; j < query_tokens.size(); ++j) positions.push_back(context.length() + j);
  ForwardCache cache;
  ActivationRecord rec;
  run_forward(params, tokens, positions, &context, all_rows(tokens.size()), false, cache, &rec.residuals);
  rec.logits = std::move(cache.logits);
  return rec;
}

ZContext capture_zcontext(const ActivationRecord& base, std::span<const Token> context_tokens,
                          const ContextLayout& layout) {
  if (context_tokens.size() > base.n_tokens()) throw InterventionError("capture_zcontext: base run is shorter than the context");
  ZContext z;
  z.tokens.assign(context_tokens.begin(), context_tokens.end());
  z.residuals.assign(base.residuals.begin(),
                     base.residuals.begin() + static_cast<std::ptrdiff_t>(context_tokens.size()));
  z.layout = layout;
  z.position_map = PositionMap::identity(context_tokens.size());
  return z;
}

ActivationRecord forward_intervened(const ModelParams& params, std::span<const Token> context_tokens,
                                    const ActivationRecord& base, const InterventionSpec& spec,
                                    std::span<const Token> query_tokens) {
  const ZContext z = apply_intervention(capture_zcontext(base, context_tokens), spec);
  return forward_frozen(params, z, query_tokens);
}

// ---------------------------------------------------------------- backward

TrainingPass::TrainingPass(const ModelParams& params, std::span<const Token> tokens,
                           std::span<const std::size_t> logit_rows)
    : params_(params), cache_(std::make_unique<ForwardCache>()) {
  check_tokens(params.config, tokens);
  for (auto r : logit_rows) {
    if (r >= tokens.size()) throw InputError("TrainingPass: logit row out of range");
  }
  const auto positions = all_rows(tokens.size());
  run_forward(params, tokens, positions, nullptr, logit_rows, true, *cache_, nullptr);
}

TrainingPass::~TrainingPass() = default;

const Matrix& TrainingPass::logits() const { return cache_->logits; }

TransposedWeights TransposedWeights::build(const ModelParams& p) {
  TransposedWeights t;
  t.unembed = transpose(p.unembed);
  for (const auto& lp : p.layers) {
    t.layers.push_back({transpose(lp.wq), transpose(lp.wk), transpose(lp.wv), transpose(lp.wo), transpose(lp.w_in),
                        transpose(lp.w_out)});
  }
  return t;
}

void TrainingPass::backward(const Matrix& dlogits, ModelParams& g, const TransposedWeights* transposed) const {
  const ModelParams& p = params_;
  TransposedWeights local;
  if (!transposed) {
    local = TransposedWeights::build(p);
    transposed = &local;
  }
  if (transposed->layers.size() != p.layers.size()) throw DimensionError("backward: transposed weights do not match");
  const ForwardCache& c = *cache_;
  const auto& cfg = p.config;
  const std::size_t T = c.rows;
  const std::size_t D = cfg.d_model;
  const std::size_t F = cfg.d_mlp;
  const std::size_t H = cfg.n_heads;
  const std::size_t dh = cfg.d_head();
  const std::size_t V = cfg.vocab_size;
  const std::size_t R = c.logit_rows.size();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  if (dlogits.rows() != R || dlogits.cols() != V) throw DimensionError("backward: dlogits shape mismatch");
  const RopeTable rope(c.positions, dh, cfg.rope_base);

  // Unembedding and final norm.
  matmul_grad_w(c.hf.data(), R, D, dlogits.values().data(), V, g.unembed.values().data());
  std::vector<double> dhf(R * D, 0.0);
  matmul_grad_x(dlogits.values().data(), R, V, transposed->unembed.data(), D, dhf.data());
  std::vector<double> xr(R * D);
  for (std::size_t r = 0; r < R; ++r) {
    std::copy_n(c.x_final.begin() + static_cast<std::ptrdiff_t>(c.logit_rows[r] * D), D,
                xr.begin() + static_cast<std::ptrdiff_t>(r * D));
  }
  std::vector<double> dxr(R * D, 0.0);
  rmsnorm_backward(xr.data(), c.inv_f.data(), R, D, p.final_gain.values().data(), dhf.data(), dxr.data(),
                   g.final_gain.values().data());
  std::vector<double> dx(T * D, 0.0);
  for (std::size_t r = 0; r < R; ++r) {
    double* dst = dx.data() + c.logit_rows[r] * D;
    for (std::size_t i = 0; i < D; ++i) dst[i] += dxr[r * D + i];
  }

  for (std::size_t li = cfg.n_layers; li-- > 0;) {
    const auto& lp = p.layers[li];
    auto& gl = g.layers[li];
    const auto& tl = transposed->layers[li];
    const LayerCache& lc = c.layers[li];

    // MLP branch.
    matmul_grad_w(lc.act.data(), T, F, dx.data(), D, gl.w_out.values().data());
    std::vector<double> dact(T * F, 0.0);
    matmul_grad_x(dx.data(), T, D, tl.w_out.data(), F, dact.data());
    for (std::size_t i = 0; i < T * F; ++i) {
      const double s = sigmoid(lc.u[i]);
      dact[i] *= s * (1.0 + lc.u[i] * (1.0 - s));
    }
    matmul_grad_w(lc.h2.data(), T, D, dact.data(), F, gl.w_in.values().data());
    std::vector<double> dh2(T * D, 0.0);
    matmul_grad_x(dact.data(), T, F, tl.w_in.data(), D, dh2.data());
    std::vector<double> dx2 = dx;
    rmsnorm_backward(lc.x2.data(), lc.inv2.data(), T, D, lp.mlp_gain.values().data(), dh2.data(), dx2.data(),
                     gl.mlp_gain.values().data());

    // Attention branch.
    matmul_grad_w(lc.o.data(), T, D, dx2.data(), D, gl.wo.values().data());
    std::vector<double> d_o(T * D, 0.0);
    matmul_grad_x(dx2.data(), T, D, tl.wo.data(), D, d_o.data());
    std::vector<double> dq(T * D, 0.0), dk(T * D, 0.0), dv(T * D, 0.0);
    std::vector<double> da(T);
    // Training passes use identity positions, so the mask is s <= t.
    for (std::size_t hd = 0; hd < H; ++hd) {
      for (std::size_t t = 0; t < T; ++t) {
        const double* a = lc.probs.data() + (hd * T + t) * T;
        const double* dot = d_o.data() + t * D + hd * dh;
        double weighted = 0.0;
        for (std::size_t s = 0; s <= t; ++s) {
          const double* vs = lc.v.data() + s * D + hd * dh;
          double* dvs = dv.data() + s * D + hd * dh;
          double acc = 0.0;
          for (std::size_t i = 0; i < dh; ++i) {
            acc += dot[i] * vs[i];
            dvs[i] += a[s] * dot[i];
          }
          da[s] = acc;
          weighted += a[s] * acc;
        }
        const double* qt = lc.q.data() + t * D + hd * dh;
        double* dqt = dq.data() + t * D + hd * dh;
        for (std::size_t s = 0; s <= t; ++s) {
          const double ds = a[s] * (da[s] - weighted) * scale;
          if (ds == 0.0) continue;
          const double* ks = lc.k.data() + s * D + hd * dh;
          double* dks = dk.data() + s * D + hd * dh;
          for (std::size_t i = 0; i < dh; ++i) {
            dqt[i] += ds * ks[i];
            dks[i] += ds * qt[i];
          }
        }
      }
    }
    for (std::size_t t = 0; t < T; ++t) {
      rope.rotate_row(dq.data() + t * D, t, H, dh, true);
      rope.rotate_row(dk.data() + t * D, t, H, dh, true);
    }
    matmul_grad_w(lc.h.data(), T, D, dq.data(), D, gl.wq.values().data());
    matmul_grad_w(lc.h.data(), T, D, dk.data(), D, gl.wk.values().data());
    matmul_grad_w(lc.h.data(), T, D, dv.data(), D, gl.wv.values().data());
    std::vector<double> dh(T * D, 0.0);
    matmul_grad_x(dq.data(), T, D, tl.wq.data(), D, dh.data());
    matmul_grad_x(dk.data(), T, D, tl.wk.data(), D, dh.data());
    matmul_grad_x(dv.data(), T, D, tl.wv.data(), D, dh.data());
    dx = std::move(dx2);
    rmsnorm_backward(lc.x.data(), lc.inv1.data(), T, D, lp.attn_gain.values().data(), dh.data(), dx.data(),
                     gl.attn_gain.values().data());
  }

  for (std::size_t t = 0; t < T; ++t) {
    auto row = g.embed.row(static_cast<std::size_t>(c.tokens[t]));
    for (std::size_t i = 0; i < D; ++i) row[i] += dx[t * D + i];
  }
}

// ---------------------------------------------------------------- checkpoints

namespace {

std::vector<std::size_t> tensor_shape(const ModelConfig& c, const std::string& name, std::size_t size) {
  if (name.ends_with("gain")) return {size};
  if (name == "embed") return {c.vocab_size, c.d_model};
  if (name == "unembed") return {c.d_model, c.vocab_size};
  if (name.ends_with("w_in")) return {c.d_model, c.d_mlp};
  if (name.ends_with("w_out")) return {c.d_mlp, c.d_model};
  return {c.d_model, c.d_model};
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ModelParams& params, const Vocabulary& vocab,
                     const nlohmann::json& extra) {
  params.validate();
  if (vocab.size() != params.config.vocab_size) {
    throw ConfigError("save_checkpoint: vocabulary size does not match the model");
  }
  TensorArchive archive;
  archive.meta = {{"kind", "transformer"}, {"config", params.config.to_json()}, {"vocab", vocab.words()}};
  if (!extra.is_null()) archive.meta["extra"] = extra;
  params.for_each_tensor([&](const std::string& name, std::span<const double> v, bool) {
    archive.add(name, tensor_shape(params.config, name, v.size()), std::vector<double>(v.begin(), v.end()));
  });
  write_archive(path, archive);
}

LoadedModel load_checkpoint(const std::filesystem::path& path) {
  TensorArchive archive = read_archive(path);
  if (archive.meta.value("kind", "") != "transformer") {
    throw FormatError(path.string() + ": not a transformer checkpoint");
  }
  LoadedModel out;
  out.meta = archive.meta;
  ModelConfig cfg;
  try {
    cfg = ModelConfig::from_json(archive.meta.at("config"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": bad config: " + e.what());
  }
  out.params = ModelParams::zeros(cfg);
  out.params.for_each_tensor([&](const std::string& name, std::span<double> v, bool) {
    if (!archive.contains(name)) throw FormatError(path.string() + ": missing tensor " + name);
    const TensorEntry& t = archive.get(name);
    if (t.shape != tensor_shape(cfg, name, v.size()) || t.data.size() != v.size()) {
      throw FormatError(path.string() + ": tensor " + name + " does not have the shape the config implies");
    }
    std::copy(t.data.begin(), t.data.end(), v.begin());
  });
  out.params.validate();
  out.vocab_words = archive.meta.value("vocab", std::vector<std::string>{});
  if (out.vocab_words.size() != cfg.vocab_size) {
    throw FormatError(path.string() + ": vocabulary size does not match config");
  }
  return out;
}

}  // namespace bindlab
