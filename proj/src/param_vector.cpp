#include "psmt/param_vector.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

#include "psmt/error.hpp"

namespace psmt {

std::size_t LayoutEntry::size() const {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::size_t Layout::add(std::string name, std::vector<std::size_t> shape) {
  LayoutEntry e{std::move(name), std::move(shape), total_};
  total_ += e.size();
  entries_.push_back(std::move(e));
  return entries_.back().offset;
}

const LayoutEntry& Layout::find(const std::string& name) const {
  for (const auto& e : entries_)
    if (e.name == name) return e;
  throw ValidationError("layout has no tensor named '" + name + "'");
}

const LayoutEntry& Layout::owner(std::size_t i) const {
  auto it = std::upper_bound(entries_.begin(), entries_.end(), i,
                             [](std::size_t v, const LayoutEntry& e) { return v < e.offset; });
  if (it == entries_.begin() || i >= total_) throw ValidationError("flat index out of range");
  return *std::prev(it);
}

ParamVector::ParamVector(std::shared_ptr<const Layout> layout, double fill)
    : layout_(std::move(layout)), values_(layout_ ? layout_->total_size() : 0, fill) {}

bool ParamVector::same_layout(const ParamVector& other) const {
  if (layout_ == other.layout_) return true;
  if (!layout_ || !other.layout_) return false;
  return *layout_ == *other.layout_;
}

bool ParamVector::all_finite() const {
  return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
}

bool ParamVector::operator==(const ParamVector& other) const {
  return same_layout(other) && values_ == other.values_;
}

void require_same_layout(const ParamVector& a, const ParamVector& b, const char* what) {
  if (!a.same_layout(b)) throw ValidationError(std::string(what) + ": parameter layouts differ");
}

double l2_distance(const ParamVector& a, const ParamVector& b) {
  require_same_layout(a, b, "l2_distance");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    acc += d * d;
  }
  return std::sqrt(acc);
}

}  // namespace psmt
