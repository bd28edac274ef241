#ifndef RFPROBE_ERROR_HPP
#define RFPROBE_ERROR_HPP

#include <stdexcept>
#include <string>

namespace rfprobe {

enum class ErrorKind {
  invalid_spec,
  schema,
  metric_axiom,
  unsupported,
  ill_conditioned,
  integration_failure,
  invalid_input,
  convergence_failure,
  excluded_pair,
  degenerate_collision,
  resolution,
  io,
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::invalid_spec: return "invalid-spec";
    case ErrorKind::schema: return "schema";
    case ErrorKind::metric_axiom: return "metric-axiom";
    case ErrorKind::unsupported: return "unsupported-operation";
    case ErrorKind::ill_conditioned: return "ill-conditioned-generator";
    case ErrorKind::integration_failure: return "integration-failure";
    case ErrorKind::invalid_input: return "invalid-input";
    case ErrorKind::convergence_failure: return "convergence-failure";
    case ErrorKind::excluded_pair: return "excluded-pair";
    case ErrorKind::degenerate_collision: return "degenerate-collision";
    case ErrorKind::resolution: return "resolution";
    case ErrorKind::io: return "io";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace rfprobe

#endif  // RFPROBE_ERROR_HPP
