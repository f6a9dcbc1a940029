#pragma once

#include <stdexcept>
#include <string>

namespace dtst {

/// Base class for every error raised by the library. `kind()` is a stable
/// machine-readable tag used by the CLI error record.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& message)
      : std::runtime_error(message), kind_(std::move(kind)) {}

  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

#define DTST_DEFINE_ERROR(Name, tag)                                   \
  class Name : public Error {                                          \
   public:                                                             \
    explicit Name(const std::string& message) : Error(tag, message) {} \
  };

DTST_DEFINE_ERROR(DimensionError, "dimension")
DTST_DEFINE_ERROR(ContractError, "contract")
DTST_DEFINE_ERROR(ConfigError, "config")
DTST_DEFINE_ERROR(DomainError, "domain")
DTST_DEFINE_ERROR(NumericError, "numeric")
DTST_DEFINE_ERROR(SamplingError, "sampling")
DTST_DEFINE_ERROR(ProtocolError, "protocol")
DTST_DEFINE_ERROR(ParseError, "parse")
DTST_DEFINE_ERROR(IoError, "io")

#undef DTST_DEFINE_ERROR

}  // namespace dtst
