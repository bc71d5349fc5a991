#pragma once

#include <cstddef>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace psmt {

/// One tensor inside a flat parameter array.
struct LayoutEntry {
  std::string name;
  std::vector<std::size_t> shape;
  std::size_t offset = 0;

  std::size_t size() const;
  bool operator==(const LayoutEntry&) const = default;
};

/// Ordered description of how a flat array maps onto named tensors.
class Layout {
 public:
  Layout() = default;

  /// Appends a tensor at the current end and returns its offset.
  std::size_t add(std::string name, std::vector<std::size_t> shape);

  std::size_t total_size() const { return total_; }
  const std::vector<LayoutEntry>& entries() const { return entries_; }
  const LayoutEntry& find(const std::string& name) const;
  /// Name of the tensor that owns flat index `i`.
  const LayoutEntry& owner(std::size_t i) const;

  bool operator==(const Layout&) const = default;

 private:
  std::vector<LayoutEntry> entries_;
  std::size_t total_ = 0;
};

/// Flat vector of all trainable parameters of one network. The layout is shared
/// between copies, so comparing layouts of vectors built from the same network
/// is a pointer check in the common case.
class ParamVector {
 public:
  ParamVector() = default;
  explicit ParamVector(std::shared_ptr<const Layout> layout, double fill = 0.0);

  std::size_t size() const { return values_.size(); }
  const Layout& layout() const { return *layout_; }
  const std::shared_ptr<const Layout>& layout_ptr() const { return layout_; }
  bool same_layout(const ParamVector& other) const;

  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }
  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }

  std::span<double> tensor(const LayoutEntry& e) { return {values_.data() + e.offset, e.size()}; }
  std::span<const double> tensor(const LayoutEntry& e) const {
    return {values_.data() + e.offset, e.size()};
  }

  bool all_finite() const;
  /// A zero vector with the same layout.
  ParamVector zeros_like() const { return ParamVector(layout_); }

  /// Exact element-wise equality (layout and values).
  bool operator==(const ParamVector& other) const;

 private:
  std::shared_ptr<const Layout> layout_;
  std::vector<double> values_;
};

/// Throws ValidationError unless `a` and `b` share a layout.
void require_same_layout(const ParamVector& a, const ParamVector& b, const char* what);

double l2_distance(const ParamVector& a, const ParamVector& b);

}  // namespace psmt
