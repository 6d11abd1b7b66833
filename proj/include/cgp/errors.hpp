#pragma once

#include <stdexcept>
#include <string>

namespace cgp {

/// Base class for every error raised by the library. `module()` names the
/// component that raised it so the CLI can report failures verbatim.
class Error : public std::runtime_error {
 public:
  Error(std::string module, const std::string& what)
      : std::runtime_error(what), module_(std::move(module)) {}
  const std::string& module() const noexcept { return module_; }
  virtual const char* kind() const noexcept { return "error"; }

 private:
  std::string module_;
};

#define CGP_DEFINE_ERROR(Name, Kind)                                        \
  class Name : public Error {                                               \
   public:                                                                  \
    using Error::Error;                                                     \
    const char* kind() const noexcept override { return Kind; }             \
  };

CGP_DEFINE_ERROR(ConfigError, "config_error")
CGP_DEFINE_ERROR(ContractViolation, "contract_violation")
CGP_DEFINE_ERROR(ConflictError, "conflict_error")
CGP_DEFINE_ERROR(MigrationError, "migration_error")
CGP_DEFINE_ERROR(ValidationError, "validation_error")
CGP_DEFINE_ERROR(TransportError, "transport_error")
CGP_DEFINE_ERROR(UnsupportedOperation, "unsupported_operation")
CGP_DEFINE_ERROR(TrainingError, "training_error")
CGP_DEFINE_ERROR(IoError, "io_error")

#undef CGP_DEFINE_ERROR

}  // namespace cgp
