#pragma once

// Token probability steering along the fitted encoding direction, and the
// metrics used to judge it.

#include <cmath>
#include <cstdint>
#include <limits>
#include <string_view>

#include "emprobe/records.hpp"

namespace emprobe::steer {

/// How a slope's p-value becomes an allocation weight factor.
enum class SigTransform { one_minus_p, neg_log_p, raw_p };

SigTransform parse_sig_transform(std::string_view name);
std::string_view to_string(SigTransform t);

/// Allocation softness. Finite values are exponents on |slope|; +inf puts all
/// weight on the largest slope, -inf spreads it uniformly.
struct Softness {
  double value = 2.0;

  static Softness argmax() { return {std::numeric_limits<double>::infinity()}; }
  static Softness uniform() { return {-std::numeric_limits<double>::infinity()}; }
  bool is_finite() const { return std::isfinite(value); }
};

/// Parses a number, "inf"/"+inf" or "-inf".
Softness parse_softness(std::string_view text);
std::string softness_to_string(Softness b);

struct SteeringPlan {
  TokenId token = 0;
  double scale = 1.0;
  Softness softness;
  SigTransform sig_transform = SigTransform::one_minus_p;
  Vector weights;  // allocation over dimensions, L1 = 1
  Vector delta;    // update added to the token's embedding row
};

struct SteerEval {
  double scale_error = 0.0;
  double kl_retained = 0.0;
  double measured_scale = 1.0;
};

/// Transformed significance per slope.
Vector significance(const Vector& p_values, SigTransform t);

Vector allocate_weights(const EncodingFit& fit, Softness b, SigTransform t);

/// delta_j = -log(scale) * w_j / slope_j, zero where w_j == 0.
SteeringPlan build_plan(const EncodingFit& fit, TokenId token, double scale, Softness b,
                        SigTransform t = SigTransform::one_minus_p);

/// Copy of `emb` with plan.delta added to row plan.token.
EmbeddingMatrix apply_plan(const EmbeddingMatrix& emb, const SteeringPlan& plan);
void apply_plan_inplace(RowMatrix& emb, const SteeringPlan& plan);

/// |log expected - log measured|.
double scale_error(double expected, double measured);

/// KL(p' || q') in nats where p', q' drop `excluded` and renormalize.
/// q' is floored at `floor` where p' > 0.
double kl_retained(const Vector& p, const Vector& q, TokenId excluded, double floor = 1e-12);

/// Scores an edit from averaged distributions before and after it on the
/// same test set. The base probability is floored at `floor`.
SteerEval evaluate_steering(const Vector& alpha_before, const Vector& alpha_after, TokenId token,
                            double expected_scale, double floor = 1e-12);
SteerEval evaluate_steering(const ProbStats& before, const ProbStats& after, TokenId token, double expected_scale,
                            double floor = 1e-12);

}  // namespace emprobe::steer
