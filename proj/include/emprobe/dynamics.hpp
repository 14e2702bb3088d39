#pragma once

// Training-dynamics probes over a series of checkpoints.

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "emprobe/records.hpp"

namespace emprobe::dynamics {

/// Adjusted R^2 of -log(max(freq / total, floor)) regressed on the output embedding.
double freq_encoding_r2(const Checkpoint& checkpoint, const CorpusFreq& freq, double floor = 1e-12);

/// 1 - ||theta_star - theta_t||_F / ||theta_star - theta_0||_F.
double convergence_rate(const RowMatrix& theta_0, const RowMatrix& theta_t, const RowMatrix& theta_star);

/// Input embedding, output embedding and each layer's query/key/value maps.
/// "out_emb" resolves to the input embedding for tied models.
std::vector<std::string> default_groups(const MicroConfig& config);

struct GroupCurve {
  std::string group;
  std::vector<double> conv_rate;  // one per step
};

struct DynamicsTrace {
  std::vector<std::uint64_t> steps;
  std::vector<double> freq_adj_r2;
  std::vector<GroupCurve> groups;
};

/// Checkpoints are sorted by step; the first must be step 0 and the last is
/// treated as the trained parameters. Throws ConfigError when fewer than two
/// checkpoints or no step-0 checkpoint are given.
DynamicsTrace trace(std::vector<Checkpoint> checkpoints, const CorpusFreq& freq,
                    const std::vector<std::string>& groups = {}, double floor = 1e-12);

/// First step whose value exceeds `threshold`.
std::optional<std::uint64_t> first_crossing(const std::vector<std::uint64_t>& steps,
                                            const std::vector<double>& values, double threshold);

/// Rows: step,group,conv_rate,freq_adj_r2.
std::string trace_csv(const DynamicsTrace& trace);

}  // namespace emprobe::dynamics
