#pragma once

#include <stdexcept>
#include <string>

namespace mesa {

// Base class for every failure raised by the library. `kind()` is the stable
// machine-readable name used in verification reports and CLI diagnostics.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(kind + ": " + what), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

#define MESA_DEFINE_ERROR(Name)                                      \
  class Name : public Error {                                        \
   public:                                                           \
    explicit Name(const std::string& what) : Error(#Name, what) {}   \
  }

MESA_DEFINE_ERROR(ShapeMismatch);
MESA_DEFINE_ERROR(NonFinite);
MESA_DEFINE_ERROR(NotSPD);
MESA_DEFINE_ERROR(UnknownPrimitive);
MESA_DEFINE_ERROR(InvalidSpec);
MESA_DEFINE_ERROR(SingularSystem);
MESA_DEFINE_ERROR(NonPositiveLambda);
MESA_DEFINE_ERROR(DegenerateReverse);
MESA_DEFINE_ERROR(NotLinearStack);
MESA_DEFINE_ERROR(ConfigMismatch);
MESA_DEFINE_ERROR(NonFiniteGradient);
MESA_DEFINE_ERROR(DivergedTraining);
MESA_DEFINE_ERROR(IoError);
MESA_DEFINE_ERROR(CheckpointMismatch);
MESA_DEFINE_ERROR(MissingPromptTokens);
MESA_DEFINE_ERROR(ConfigError);

#undef MESA_DEFINE_ERROR

}  // namespace mesa
