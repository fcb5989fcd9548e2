#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace ranp {

// Tensor or layer extents do not line up.
class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A configuration value is out of range (kernel too large, bad factor, ...).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A caller broke a precondition (non-scalar loss, kappa outside [0,1), ...).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Malformed architecture / mask / importance document.
class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A mask assignment leaves at least one layer without neurons.
class InfeasibleError : public std::runtime_error {
 public:
  InfeasibleError(const std::string& what, std::vector<std::string> empty_layers)
      : std::runtime_error(what), empty_layers_(std::move(empty_layers)) {}

  const std::vector<std::string>& empty_layers() const noexcept { return empty_layers_; }

 private:
  std::vector<std::string> empty_layers_;
};

}  // namespace ranp
