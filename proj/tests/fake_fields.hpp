#pragma once

// Velocity fields with closed-form behavior for tests.

#include <vector>

#include "prefgrpo/diffcore.hpp"
#include "prefgrpo/flowmatch.hpp"

namespace testing_fields {

using prefgrpo::Tensor;
using prefgrpo::TensorMap;

/// v(x, t, c) = k, the same constant vector everywhere.
struct ConstantField {
  std::vector<double> k;

  std::size_t dim() const { return k.size(); }
  Tensor predict(const Tensor& x, std::span<const double> t, std::span<const std::size_t> c) const {
    return predict(TensorMap{}, x, t, c);
  }
  Tensor predict(const TensorMap&, const Tensor& x, std::span<const double>, std::span<const std::size_t>) const {
    std::vector<double> out;
    for (std::size_t r = 0; r < x.rows(); ++r) out.insert(out.end(), k.begin(), k.end());
    return Tensor::matrix(x.rows(), k.size(), std::move(out));
  }
};

/// v(x, t, c) = x (a linear field, useful for hand-checked drifts).
struct IdentityField {
  std::size_t d = 2;

  std::size_t dim() const { return d; }
  Tensor predict(const Tensor& x, std::span<const double> t, std::span<const std::size_t> c) const {
    return predict(TensorMap{}, x, t, c);
  }
  Tensor predict(const TensorMap&, const Tensor& x, std::span<const double>, std::span<const std::size_t>) const {
    return x.detached();
  }
};

static_assert(prefgrpo::VelocityModel<ConstantField>);
static_assert(prefgrpo::VelocityModel<IdentityField>);

}  // namespace testing_fields
