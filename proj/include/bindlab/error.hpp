#pragma once

#include <stdexcept>
#include <string>

namespace bindlab {

// Every library failure derives from Error so callers can catch one type.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define BINDLAB_ERROR_KIND(Name)                                   \
  class Name : public Error {                                      \
   public:                                                         \
    explicit Name(const std::string& what) : Error(what) {}        \
  };

BINDLAB_ERROR_KIND(DimensionError)
BINDLAB_ERROR_KIND(NumericError)
BINDLAB_ERROR_KIND(ConfigError)
BINDLAB_ERROR_KIND(InputError)
BINDLAB_ERROR_KIND(InterventionError)
BINDLAB_ERROR_KIND(SamplingError)
BINDLAB_ERROR_KIND(EmptyPopulationError)
BINDLAB_ERROR_KIND(FormatError)

#undef BINDLAB_ERROR_KIND

}  // namespace bindlab
