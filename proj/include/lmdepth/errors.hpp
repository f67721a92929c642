#pragma once

#include <stdexcept>
#include <string>

namespace lmdepth {

// Every failure raised by the library derives from Error. The CLI maps the
// category onto its exit code.
enum class ErrorKind {
  shape,
  parameter,
  domain,
  contract,
  format,
  io,
  config,
  empty_target,
  numerical,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

#define LMDEPTH_DEFINE_ERROR(Name, Kind)                              \
  class Name : public Error {                                         \
   public:                                                            \
    explicit Name(const std::string& what) : Error(Kind, what) {}     \
  };

LMDEPTH_DEFINE_ERROR(ShapeError, ErrorKind::shape)
LMDEPTH_DEFINE_ERROR(ParameterError, ErrorKind::parameter)
LMDEPTH_DEFINE_ERROR(DomainError, ErrorKind::domain)
LMDEPTH_DEFINE_ERROR(ContractError, ErrorKind::contract)
LMDEPTH_DEFINE_ERROR(FormatError, ErrorKind::format)
LMDEPTH_DEFINE_ERROR(IoError, ErrorKind::io)
LMDEPTH_DEFINE_ERROR(ConfigError, ErrorKind::config)
LMDEPTH_DEFINE_ERROR(EmptyTargetError, ErrorKind::empty_target)
LMDEPTH_DEFINE_ERROR(NumericalError, ErrorKind::numerical)

#undef LMDEPTH_DEFINE_ERROR

}  // namespace lmdepth
