#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace psmt {

/// Bad arguments, malformed inputs, shape or layout mismatches.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A non-finite value showed up during a computation.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Collects every violation found while checking a value, then throws once.
class Violations {
 public:
  void add(std::string msg) { items_.push_back(std::move(msg)); }
  bool empty() const { return items_.empty(); }
  const std::vector<std::string>& items() const { return items_; }

  void throw_if_any(const std::string& what) const {
    if (items_.empty()) return;
    std::string msg = what + ":";
    for (const auto& v : items_) msg += "\n  - " + v;
    throw ValidationError(msg);
  }

 private:
  std::vector<std::string> items_;
};

}  // namespace psmt
