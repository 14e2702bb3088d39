#pragma once

// Machine-readable report emission: JSON for scalar results, CSV for curves.

#include <json.hpp>
#include <string>

#include "emprobe/probe.hpp"
#include "emprobe/records.hpp"

namespace emprobe::report {

/// Shortest decimal that round-trips to the same double.
std::string format_real(double value);

nlohmann::json fit_json(const EncodingFit& fit);
EncodingFit fit_from_json(const nlohmann::json& j);

/// Rows: kind,index,value,aux. kind is "pc" (value = |spearman|, aux =
/// variance ratio) or "dim" (value = |slope|, aux = |spearman|).
std::string sparsity_csv(const probe::SparsityReport& report);

/// Rows: token,pc1,pc2,percentile where percentile is the rank percentile of
/// the token's averaged probability (100 = most probable).
std::string pca2d_csv(const EmbeddingMatrix& emb, const Vector& alpha);

}  // namespace emprobe::report
