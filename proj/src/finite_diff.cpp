#include "crossing/finite_diff.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "crossing/errors.hpp"

namespace crossing {

namespace {

double checked_eval(const std::function<double()>& f, std::size_t k) {
  const double v = f();
  if (!std::isfinite(v)) {
    throw NumericError("finite_diff_grad: non-finite evaluation at element " + std::to_string(k));
  }
  return v;
}

}  // namespace

Tensor finite_diff_grad_inplace(const std::function<double()>& f, Tensor& x, double h) {
  auto values = x.mutable_data();
  std::vector<double> out(values.size());
  for (std::size_t k = 0; k < values.size(); ++k) {
    const double saved = values[k];
    values[k] = saved + h;
    const double plus = checked_eval(f, k);
    values[k] = saved - h;
    const double minus = checked_eval(f, k);
    values[k] = saved;
    out[k] = (plus - minus) / (2.0 * h);
  }
  return Tensor(x.shape(), std::move(out));
}

Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x, double h) {
  Tensor work = x.clone();
  work.set_requires_grad(false);
  return finite_diff_grad_inplace([&] { return f(work); }, work, h);
}

double relative_error(std::span<const double> a, std::span<const double> b, double floor) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  const std::size_t n = std::min(a.size(), b.size());
  for (std::size_t i = 0; i < n; ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double denom = std::sqrt(std::max(na, nb));
  if (denom < floor) return std::sqrt(diff) < floor ? 0.0 : 1.0;
  return std::sqrt(diff) / denom;
}

}  // namespace crossing
