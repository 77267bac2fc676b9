#pragma once

#include <stdexcept>
#include <string>

namespace vcforest {

// Every library failure derives from Error and carries a stable code string.
// The CLI maps codes to exit statuses; see exit_status().
class Error : public std::runtime_error {
 public:
  Error(std::string code, const std::string& what)
      : std::runtime_error(what), code_(std::move(code)) {}
  const std::string& code() const noexcept { return code_; }

 private:
  std::string code_;
};

#define VCFOREST_DEFINE_ERROR(Name)                                 \
  class Name : public Error {                                       \
   public:                                                          \
    explicit Name(const std::string& what) : Error(#Name, what) {}  \
  }

VCFOREST_DEFINE_ERROR(SchemaError);
VCFOREST_DEFINE_ERROR(ParseError);
VCFOREST_DEFINE_ERROR(DomainError);
VCFOREST_DEFINE_ERROR(DegenerateColumnError);
VCFOREST_DEFINE_ERROR(AlreadyAugmentedError);
VCFOREST_DEFINE_ERROR(DimError);
VCFOREST_DEFINE_ERROR(ConfigError);
VCFOREST_DEFINE_ERROR(SingularMatrixError);
VCFOREST_DEFINE_ERROR(NoValidLeafError);
VCFOREST_DEFINE_ERROR(NumericalError);
VCFOREST_DEFINE_ERROR(DegenerateFitError);
VCFOREST_DEFINE_ERROR(FingerprintError);
VCFOREST_DEFINE_ERROR(AbortError);
VCFOREST_DEFINE_ERROR(IoError);

#undef VCFOREST_DEFINE_ERROR

// 0 ok, 2 config/usage, 3 prediction failure, 4 fingerprint, 5 numerical.
inline int exit_status(const std::string& code) {
  if (code == "FingerprintError") return 4;
  if (code == "SingularMatrixError" || code == "NoValidLeafError" ||
      code == "NumericalError" || code == "DegenerateFitError" ||
      code == "AbortError")
    return 5;
  return 2;
}

}  // namespace vcforest
