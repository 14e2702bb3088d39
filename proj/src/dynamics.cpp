#include "emprobe/dynamics.hpp"

#include <algorithm>
#include <sstream>

#include "emprobe/error.hpp"
#include "emprobe/probe.hpp"
#include "emprobe/report.hpp"

namespace emprobe::dynamics {

namespace {

const RowMatrix& group_param(const Checkpoint& c, const std::string& group) {
  if (group == "out_emb") return c.output_embedding();
  return c.param(group);
}

}  // namespace

double freq_encoding_r2(const Checkpoint& checkpoint, const CorpusFreq& freq, double floor) {
  freq.validate();
  const RowMatrix& emb = checkpoint.output_embedding();
  if (freq.vocab_size() != static_cast<std::size_t>(emb.rows())) {
    throw InvariantError("corpus frequency vocabulary does not match embedding rows");
  }
  return probe::ols_fit(probe::neg_log_targets(freq.relative(), floor), emb).adj_r2;
}

double convergence_rate(const RowMatrix& theta_0, const RowMatrix& theta_t, const RowMatrix& theta_star) {
  if (theta_0.rows() != theta_t.rows() || theta_0.cols() != theta_t.cols() || theta_0.rows() != theta_star.rows() ||
      theta_0.cols() != theta_star.cols()) {
    throw InvariantError("convergence rate needs equal parameter shapes");
  }
  const double total = (theta_star - theta_0).norm();
  if (total == 0.0) throw InvariantError("trained parameters equal the initialization; convergence rate undefined");
  return 1.0 - (theta_star - theta_t).norm() / total;
}

std::vector<std::string> default_groups(const MicroConfig& config) {
  std::vector<std::string> groups{"tok_emb", "out_emb"};
  for (std::uint64_t l = 0; l < config.n_layers; ++l) {
    for (const char* w : {"attn.wq", "attn.wk", "attn.wv"}) groups.push_back("layers." + std::to_string(l) + "." + w);
  }
  return groups;
}

DynamicsTrace trace(std::vector<Checkpoint> checkpoints, const CorpusFreq& freq,
                    const std::vector<std::string>& groups, double floor) {
  if (checkpoints.size() < 2) throw ConfigError("dynamics needs at least two checkpoints");
  std::stable_sort(checkpoints.begin(), checkpoints.end(),
                   [](const Checkpoint& a, const Checkpoint& b) { return a.step < b.step; });
  if (checkpoints.front().step != 0) throw ConfigError("dynamics needs the step-0 checkpoint");
  for (std::size_t i = 1; i < checkpoints.size(); ++i) {
    if (checkpoints[i].step == checkpoints[i - 1].step) throw ConfigError("duplicate checkpoint step");
  }

  const std::vector<std::string> names = groups.empty() ? default_groups(checkpoints.front().config) : groups;
  const Checkpoint& first = checkpoints.front();
  const Checkpoint& last = checkpoints.back();

  DynamicsTrace out;
  for (const auto& c : checkpoints) {
    out.steps.push_back(c.step);
    out.freq_adj_r2.push_back(freq_encoding_r2(c, freq, floor));
  }
  for (const auto& name : names) {
    GroupCurve curve;
    curve.group = name;
    const RowMatrix& theta_0 = group_param(first, name);
    const RowMatrix& theta_star = group_param(last, name);
    for (std::size_t i = 0; i < checkpoints.size(); ++i) {
      // endpoints hold by definition; pin them instead of trusting rounding
      if (i == 0) {
        curve.conv_rate.push_back(0.0);
      } else if (i + 1 == checkpoints.size()) {
        curve.conv_rate.push_back(1.0);
      } else {
        curve.conv_rate.push_back(convergence_rate(theta_0, group_param(checkpoints[i], name), theta_star));
      }
    }
    out.groups.push_back(std::move(curve));
  }
  return out;
}

std::optional<std::uint64_t> first_crossing(const std::vector<std::uint64_t>& steps,
                                            const std::vector<double>& values, double threshold) {
  for (std::size_t i = 0; i < steps.size() && i < values.size(); ++i) {
    if (values[i] > threshold) return steps[i];
  }
  return std::nullopt;
}

std::string trace_csv(const DynamicsTrace& trace) {
  std::ostringstream out;
  out << "step,group,conv_rate,freq_adj_r2\n";
  for (const auto& g : trace.groups) {
    for (std::size_t i = 0; i < trace.steps.size(); ++i) {
      out << trace.steps[i] << ',' << g.group << ',' << report::format_real(g.conv_rate[i]) << ','
          << report::format_real(trace.freq_adj_r2[i]) << '\n';
    }
  }
  return out.str();
}

}  // namespace emprobe::dynamics
