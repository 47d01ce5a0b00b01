#pragma once

#include <functional>
#include <span>
#include <vector>

#include "coevo/tensor.hpp"

namespace coevo::numerics {

// Per-channel first and second moments of a C,H,W tensor.
struct ChannelStats {
  std::vector<double> mean;
  std::vector<double> var;  // population variance, always >= 0
};

// Pools mean and population variance over the H*W pixels of each channel.
// Throws std::invalid_argument("degenerate input") on an empty tensor.
ChannelStats channel_stats(const Tensor& x);

// s = a.b / (|a||b|). Throws on zero-norm input.
double cosine_similarity(std::span<const double> a, std::span<const double> b);

double l2_norm(std::span<const double> v);

// softmax(logits) with max-subtraction; writes probabilities into out.
void softmax(std::span<const double> logits, std::span<double> out);

// -log softmax(logits)[target], computed stably. target must be in range.
double softmax_cross_entropy(std::span<const double> logits, int target);

// Result of comparing an analytic gradient against central finite
// differences, parameter by parameter.
struct GradCheckReport {
  double max_rel_error = 0.0;
  std::vector<double> per_parameter_errors;
};

using ScalarFn = std::function<double(std::span<const double>)>;
using GradFn = std::function<std::vector<double>(std::span<const double>)>;

// Relative error per parameter: |g_a - g_fd| / max(1e-8, |g_a| + |g_fd|),
// with g_fd the central difference (f(x+eps e_i) - f(x-eps e_i)) / (2 eps).
// Throws if f evaluates non-finite anywhere in the probe.
GradCheckReport grad_check(const ScalarFn& f, const GradFn& analytic_grad,
                           std::span<const double> point, double epsilon);

}  // namespace coevo::numerics
