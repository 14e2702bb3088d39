#include "emprobe/steer.hpp"

#include <charconv>
#include <cmath>
#include <string>

#include "emprobe/error.hpp"
#include "emprobe/probe.hpp"

namespace emprobe::steer {

SigTransform parse_sig_transform(std::string_view name) {
  if (name == "one_minus_p") return SigTransform::one_minus_p;
  if (name == "neg_log_p") return SigTransform::neg_log_p;
  if (name == "raw_p") return SigTransform::raw_p;
  throw ConfigError("unknown significance transform '" + std::string(name) + "'");
}

std::string_view to_string(SigTransform t) {
  switch (t) {
    case SigTransform::one_minus_p: return "one_minus_p";
    case SigTransform::neg_log_p: return "neg_log_p";
    case SigTransform::raw_p: return "raw_p";
  }
  return "one_minus_p";
}

Softness parse_softness(std::string_view text) {
  if (text == "inf" || text == "+inf") return Softness::argmax();
  if (text == "-inf") return Softness::uniform();
  double value = 0.0;
  const auto* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc() || ptr != end || !std::isfinite(value)) {
    throw ConfigError("softness must be a finite number, inf or -inf (got '" + std::string(text) + "')");
  }
  return {value};
}

std::string softness_to_string(Softness b) {
  if (b.value == std::numeric_limits<double>::infinity()) return "inf";
  if (b.value == -std::numeric_limits<double>::infinity()) return "-inf";
  char buf[32];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, b.value);
  return std::string(buf, ptr);
}

Vector significance(const Vector& p_values, SigTransform t) {
  switch (t) {
    case SigTransform::one_minus_p: return (1.0 - p_values.array()).matrix();
    case SigTransform::neg_log_p: return (-p_values.array().max(1e-300).log()).matrix();
    case SigTransform::raw_p: return p_values;
  }
  return p_values;
}

Vector allocate_weights(const EncodingFit& fit, Softness b, SigTransform t) {
  const Vector magnitude = fit.direction.cwiseAbs();
  const Eigen::Index d = magnitude.size();
  if (d == 0 || magnitude.maxCoeff() == 0.0) throw InvariantError("cannot steer along an all-zero direction");

  Vector w = Vector::Zero(d);
  if (b.value == std::numeric_limits<double>::infinity()) {
    Eigen::Index arg = 0;
    magnitude.maxCoeff(&arg);  // first maximum on ties
    w[arg] = 1.0;
    return w;
  }
  if (b.value == -std::numeric_limits<double>::infinity()) {
    for (Eigen::Index j = 0; j < d; ++j) w[j] = magnitude[j] > 0.0 ? 1.0 : 0.0;
    return w / w.sum();
  }
  if (fit.p_values.size() != d) throw InvariantError("fit p-values do not match direction");
  const Vector sig = significance(fit.p_values, t);
  for (Eigen::Index j = 0; j < d; ++j) {
    if (magnitude[j] > 0.0) w[j] = std::pow(magnitude[j], b.value) * sig[j];
  }
  const double total = w.sum();
  if (!(total > 0.0) || !std::isfinite(total)) throw InvariantError("steering weights normalize a zero vector");
  return w / total;
}

SteeringPlan build_plan(const EncodingFit& fit, TokenId token, double scale, Softness b, SigTransform t) {
  if (!(scale > 0.0) || !std::isfinite(scale)) throw InvariantError("steering scale must be positive and finite");
  SteeringPlan plan;
  plan.token = token;
  plan.scale = scale;
  plan.softness = b;
  plan.sig_transform = t;
  plan.weights = allocate_weights(fit, b, t);
  const double shift = -std::log(scale);
  plan.delta = Vector::Zero(plan.weights.size());
  for (Eigen::Index j = 0; j < plan.weights.size(); ++j) {
    if (plan.weights[j] > 0.0 && fit.direction[j] != 0.0) plan.delta[j] = shift * plan.weights[j] / fit.direction[j];
  }
  return plan;
}

void apply_plan_inplace(RowMatrix& emb, const SteeringPlan& plan) {
  if (plan.token >= emb.rows()) throw InvariantError("steered token " + std::to_string(plan.token) + " out of range");
  if (plan.delta.size() != emb.cols()) throw InvariantError("plan width does not match embedding");
  emb.row(plan.token) += plan.delta.transpose();
}

EmbeddingMatrix apply_plan(const EmbeddingMatrix& emb, const SteeringPlan& plan) {
  EmbeddingMatrix out = emb;
  apply_plan_inplace(out.data, plan);
  return out;
}

double scale_error(double expected, double measured) {
  if (!(expected > 0.0) || !(measured > 0.0)) throw InvariantError("scale error needs positive scales");
  return std::abs(std::log(expected) - std::log(measured));
}

double kl_retained(const Vector& p, const Vector& q, TokenId excluded, double floor) {
  if (p.size() != q.size() || p.size() < 2) throw InvariantError("kl_retained needs equal lengths > 1");
  if (excluded >= p.size()) throw InvariantError("excluded token out of range");
  const double p_rest = p.sum() - p[excluded];
  const double q_rest = q.sum() - q[excluded];
  if (!(p_rest > 0.0) || !(q_rest > 0.0)) throw InvariantError("no retained probability mass");
  double kl = 0.0;
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    if (i == static_cast<Eigen::Index>(excluded)) continue;
    const double pi = p[i] / p_rest;
    if (pi <= 0.0) continue;
    const double qi = std::max(q[i] / q_rest, floor);
    kl += pi * std::log(pi / qi);
  }
  return std::max(kl, 0.0);
}

SteerEval evaluate_steering(const Vector& alpha_before, const Vector& alpha_after, TokenId token,
                            double expected_scale, double floor) {
  if (alpha_before.size() != alpha_after.size()) throw InvariantError("distributions differ in length");
  if (token >= alpha_before.size()) throw InvariantError("steered token out of range");
  SteerEval out;
  out.measured_scale = std::max(alpha_after[token], floor) / std::max(alpha_before[token], floor);
  out.scale_error = scale_error(expected_scale, out.measured_scale);
  out.kl_retained = kl_retained(alpha_before, alpha_after, token, floor);
  return out;
}

SteerEval evaluate_steering(const ProbStats& before, const ProbStats& after, TokenId token, double expected_scale,
                            double floor) {
  return evaluate_steering(probe::finalize_avg_prob(before), probe::finalize_avg_prob(after), token, expected_scale,
                           floor);
}

}  // namespace emprobe::steer
