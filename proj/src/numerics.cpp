#include "coevo/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace coevo::numerics {

bool Tensor::all_finite() const {
  for (double v : values)
    if (!std::isfinite(v)) return false;
  return true;
}

ChannelStats channel_stats(const Tensor& x) {
  if (x.rank() != 3) throw std::invalid_argument("channel_stats expects a C,H,W tensor");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (c < 1 || h < 1 || w < 1 || x.numel() == 0)
    throw std::invalid_argument("degenerate input");

  ChannelStats out;
  out.mean.resize(c);
  out.var.resize(c);
  const int pixels = h * w;
  for (int ch = 0; ch < c; ++ch) {
    const double* p = x.values.data() + static_cast<std::size_t>(ch) * pixels;
    double sum = 0.0;
    for (int i = 0; i < pixels; ++i) sum += p[i];
    const double mu = sum / pixels;
    double acc = 0.0;
    for (int i = 0; i < pixels; ++i) {
      const double d = p[i] - mu;
      acc += d * d;
    }
    out.mean[ch] = mu;
    out.var[ch] = std::max(0.0, acc / pixels);
  }
  return out;
}

double l2_norm(std::span<const double> v) {
  double acc = 0.0;
  for (double x : v) acc += x * x;
  return std::sqrt(acc);
}

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size())
    throw std::invalid_argument("cosine_similarity dimension mismatch");
  const double na = l2_norm(a), nb = l2_norm(b);
  if (na == 0.0 || nb == 0.0) throw std::invalid_argument("zero-norm vector");
  double dot = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) dot += a[i] * b[i];
  return std::clamp(dot / (na * nb), -1.0, 1.0);
}

void softmax(std::span<const double> logits, std::span<double> out) {
  const double m = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - m);
    z += out[i];
  }
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] /= z;
}

double softmax_cross_entropy(std::span<const double> logits, int target) {
  if (target < 0 || static_cast<std::size_t>(target) >= logits.size())
    throw std::out_of_range("softmax_cross_entropy target out of range");
  const double m = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double l : logits) z += std::exp(l - m);
  return std::log(z) - (logits[target] - m);
}

GradCheckReport grad_check(const ScalarFn& f, const GradFn& analytic_grad,
                           std::span<const double> point, double epsilon) {
  const std::vector<double> ga = analytic_grad(point);
  if (ga.size() != point.size())
    throw std::invalid_argument("analytic gradient size mismatch");

  std::vector<double> probe(point.begin(), point.end());
  GradCheckReport report;
  report.per_parameter_errors.resize(point.size());
  for (std::size_t i = 0; i < point.size(); ++i) {
    const double saved = probe[i];
    probe[i] = saved + epsilon;
    const double fp = f(probe);
    probe[i] = saved - epsilon;
    const double fm = f(probe);
    probe[i] = saved;
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw std::runtime_error("grad_check: non-finite objective");
    const double gfd = (fp - fm) / (2.0 * epsilon);
    const double denom = std::max(1e-8, std::abs(ga[i]) + std::abs(gfd));
    report.per_parameter_errors[i] = std::abs(ga[i] - gfd) / denom;
    report.max_rel_error = std::max(report.max_rel_error, report.per_parameter_errors[i]);
  }
  return report;
}

}  // namespace coevo::numerics
