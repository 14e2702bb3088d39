#include "emprobe/report.hpp"

#include <charconv>
#include <cmath>
#include <sstream>

#include "emprobe/error.hpp"

namespace emprobe::report {

std::string format_real(double value) {
  if (std::isnan(value)) return "nan";
  if (std::isinf(value)) return value > 0 ? "inf" : "-inf";
  char buf[40];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, value);
  return std::string(buf, ptr);
}

namespace {

nlohmann::json to_array(const Vector& v) {
  nlohmann::json out = nlohmann::json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) out.push_back(v[i]);
  return out;
}

Vector from_array(const nlohmann::json& j) {
  Vector v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) v[static_cast<Eigen::Index>(i)] = j[i].get<double>();
  return v;
}

}  // namespace

nlohmann::json fit_json(const EncodingFit& fit) {
  nlohmann::json j;
  j["direction"] = to_array(fit.direction);
  j["intercept"] = fit.intercept;
  j["p_values"] = to_array(fit.p_values);
  j["adj_r2"] = fit.adj_r2;
  j["dof"] = fit.dof;
  j["r2"] = fit.r2;
  j["residual_variance"] = fit.residual_variance;
  j["floor"] = fit.floor;
  return j;
}

EncodingFit fit_from_json(const nlohmann::json& j) {
  try {
    EncodingFit fit;
    fit.direction = from_array(j.at("direction"));
    fit.intercept = j.at("intercept").get<double>();
    fit.p_values = from_array(j.at("p_values"));
    fit.adj_r2 = j.at("adj_r2").get<double>();
    fit.dof = j.at("dof").get<std::uint64_t>();
    fit.r2 = j.value("r2", 0.0);
    fit.residual_variance = j.value("residual_variance", 0.0);
    fit.floor = j.value("floor", 0.0);
    fit.validate();
    return fit;
  } catch (const nlohmann::json::exception& e) {
    throw InvariantError(std::string("malformed fit JSON: ") + e.what());
  }
}

std::string sparsity_csv(const probe::SparsityReport& report) {
  std::ostringstream out;
  out << "kind,index,value,aux\n";
  for (Eigen::Index j = 0; j < report.pc_spearman.size(); ++j) {
    out << "pc," << j << ',' << format_real(report.pc_spearman[j]) << ',' << format_real(report.pc_variance_ratio[j])
        << '\n';
  }
  for (Eigen::Index j = 0; j < report.dim_slopes.size(); ++j) {
    out << "dim," << j << ',' << format_real(report.dim_slopes[j]) << ',' << format_real(report.dim_spearman[j])
        << '\n';
  }
  return out.str();
}

std::string pca2d_csv(const EmbeddingMatrix& emb, const Vector& alpha) {
  if (static_cast<std::size_t>(alpha.size()) != emb.rows()) throw InvariantError("alpha length does not match rows");
  const std::size_t k = std::min<std::size_t>(2, std::min(emb.rows(), emb.cols()));
  const probe::PcaResult p = probe::pca(emb.data, k);
  const Vector ranks = probe::fractional_ranks(std::span<const double>(alpha.data(), emb.rows()));
  const double n = static_cast<double>(emb.rows());
  std::ostringstream out;
  out << "token,pc1,pc2,percentile\n";
  for (Eigen::Index i = 0; i < p.scores.rows(); ++i) {
    const double pc2 = k > 1 ? p.scores(i, 1) : 0.0;
    out << i << ',' << format_real(p.scores(i, 0)) << ',' << format_real(pc2) << ','
        << format_real(100.0 * ranks[i] / n) << '\n';
  }
  return out.str();
}

}  // namespace emprobe::report
