#pragma once

#include <cstddef>
#include <optional>
#include <vector>

#include <nlohmann/json.hpp>

namespace rarecell {

/// One-class SVM with an RBF kernel (nu formulation).
///
/// Solves  min 1/2 a'Qa  s.t. 0 <= a_i <= 1, sum a_i = nu * n  with SMO and
/// second-order working-set selection. The decision value of z is
/// sum_i a_i K(x_i, z) - rho; positive for inliers.
class OneClassSvm {
 public:
  struct Options {
    double nu = 0.1;
    std::optional<double> gamma;  // empty = "auto" (1 / n_features)
    double tolerance = 1e-3;
    std::size_t max_iterations = 10'000'000;
  };

  OneClassSvm() = default;

  // Rows of `data` are feature vectors of equal length; needs >= 2 rows.
  static OneClassSvm fit(const std::vector<std::vector<float>>& data, const Options& options);

  bool fitted() const noexcept { return !support_.empty(); }
  double decision_function(const std::vector<float>& z) const;
  // Negated decision value: larger means more anomalous.
  double anomaly_score(const std::vector<float>& z) const { return -decision_function(z); }

  double gamma() const noexcept { return gamma_; }
  double rho() const noexcept { return rho_; }
  double nu() const noexcept { return nu_; }
  std::size_t support_size() const noexcept { return support_.size(); }
  std::size_t iterations() const noexcept { return iterations_; }

  nlohmann::json to_json() const;
  static OneClassSvm from_json(const nlohmann::json& j);

 private:
  std::vector<std::vector<float>> support_;
  std::vector<double> coef_;
  double gamma_ = 0.0;
  double rho_ = 0.0;
  double nu_ = 0.1;
  std::size_t iterations_ = 0;
};

}  // namespace rarecell
