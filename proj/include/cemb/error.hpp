#pragma once

#include <stdexcept>
#include <string>

namespace cemb {

// Every error raised by the library derives from Error. The CLI maps
// IoError to exit code 2 and everything else to exit code 1.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define CEMB_DEFINE_ERROR(Name)              \
  class Name : public Error {                \
   public:                                   \
    explicit Name(const std::string& what)   \
        : Error(#Name ": " + what) {}        \
  }

CEMB_DEFINE_ERROR(DimensionError);
CEMB_DEFINE_ERROR(DomainError);
CEMB_DEFINE_ERROR(ContractError);
CEMB_DEFINE_ERROR(DegenerateInputError);
CEMB_DEFINE_ERROR(DeterminismError);
CEMB_DEFINE_ERROR(InputError);
CEMB_DEFINE_ERROR(CapacityError);
CEMB_DEFINE_ERROR(ConfigError);
CEMB_DEFINE_ERROR(BatchError);
CEMB_DEFINE_ERROR(RankingError);
CEMB_DEFINE_ERROR(SpecError);
CEMB_DEFINE_ERROR(EvalError);
CEMB_DEFINE_ERROR(FormatError);
CEMB_DEFINE_ERROR(CorruptionError);
CEMB_DEFINE_ERROR(NumericError);

#undef CEMB_DEFINE_ERROR

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error("IoError: " + what) {}
};

}  // namespace cemb
