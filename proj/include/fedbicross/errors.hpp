#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace fedbicross {

// Caller passed data that violates a documented precondition.
class InputError : public std::invalid_argument {
 public:
  explicit InputError(const std::string& what) : std::invalid_argument(what) {}
};

// Synthesis produced a non-finite loss or gradient.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, std::size_t iteration)
      : std::runtime_error(what), iteration(iteration) {}
  std::size_t iteration;
};

// Filesystem failure while persisting artifacts.
class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

// Configuration rejected; carries every violation found, not just the first.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(std::vector<std::string> violations)
      : std::runtime_error(join(violations)), violations(std::move(violations)) {}
  std::vector<std::string> violations;

 private:
  static std::string join(const std::vector<std::string>& v) {
    std::string out = "invalid configuration:";
    for (const auto& s : v) out += "\n  - " + s;
    return out;
  }
};

}  // namespace fedbicross
