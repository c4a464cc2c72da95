#include "rarecell/ocsvm.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>

#include "rarecell/errors.hpp"

namespace rarecell {

namespace {

constexpr double kTau = 1e-12;

double squared_distance(const std::vector<float>& a, const std::vector<float>& b) {
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    const double d = static_cast<double>(a[k]) - static_cast<double>(b[k]);
    s += d * d;
  }
  return s;
}

// Kernel rows computed on demand with FIFO eviction under a memory budget.
class KernelRows {
 public:
  KernelRows(const std::vector<std::vector<float>>& x, double gamma, std::size_t budget_bytes)
      : x_(x), gamma_(gamma), rows_(x.size()) {
    const std::size_t row_bytes = std::max<std::size_t>(x.size() * sizeof(float), 1);
    capacity_ = std::max<std::size_t>(budget_bytes / row_bytes, 4);
  }

  const std::vector<float>& row(std::size_t i) {
    if (rows_[i].empty()) {
      if (order_.size() >= capacity_) {
        rows_[order_.front()].clear();
        rows_[order_.front()].shrink_to_fit();
        order_.pop_front();
      }
      auto& r = rows_[i];
      r.resize(x_.size());
      for (std::size_t j = 0; j < x_.size(); ++j) {
        r[j] = static_cast<float>(std::exp(-gamma_ * squared_distance(x_[i], x_[j])));
      }
      order_.push_back(i);
    }
    return rows_[i];
  }

 private:
  const std::vector<std::vector<float>>& x_;
  double gamma_;
  std::vector<std::vector<float>> rows_;
  std::deque<std::size_t> order_;
  std::size_t capacity_;
};

}  // namespace

OneClassSvm OneClassSvm::fit(const std::vector<std::vector<float>>& data, const Options& options) {
  const std::size_t n = data.size();
  if (n < 2) throw ArgumentError("one-class SVM needs at least 2 training points");
  if (!(options.nu > 0.0 && options.nu <= 1.0)) throw ArgumentError("nu must be in (0, 1]");
  const std::size_t dim = data.front().size();
  if (dim == 0) throw ArgumentError("empty feature vectors");
  for (const auto& row : data) {
    if (row.size() != dim) throw ArgumentError("feature vectors differ in length");
    for (float v : row) {
      if (!std::isfinite(v)) throw NumericError("non-finite feature value");
    }
  }
  const double gamma = options.gamma.value_or(1.0 / static_cast<double>(dim));
  if (!(gamma > 0.0)) throw ArgumentError("gamma must be positive");

  // Box constraint C = 1, equality sum(alpha) = nu * n.
  std::vector<double> alpha(n, 0.0);
  const double nu_n = options.nu * static_cast<double>(n);
  const auto whole = static_cast<std::size_t>(nu_n);
  for (std::size_t i = 0; i < whole && i < n; ++i) alpha[i] = 1.0;
  if (whole < n) alpha[whole] = nu_n - static_cast<double>(whole);

  KernelRows q(data, gamma, std::size_t{256} << 20);
  std::vector<double> grad(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    if (alpha[i] <= 0.0) continue;
    const auto& qi = q.row(i);
    for (std::size_t j = 0; j < n; ++j) grad[j] += alpha[i] * qi[j];
  }

  std::size_t iter = 0;
  for (; iter < options.max_iterations; ++iter) {
    double gmax = -std::numeric_limits<double>::infinity();
    std::size_t i_sel = n;
    for (std::size_t t = 0; t < n; ++t) {
      if (alpha[t] < 1.0 && -grad[t] >= gmax) {
        gmax = -grad[t];
        i_sel = t;
      }
    }
    double gmax2 = -std::numeric_limits<double>::infinity();
    std::size_t j_sel = n;
    double best = std::numeric_limits<double>::infinity();
    std::vector<float> qi_sel;
    if (i_sel < n) qi_sel = q.row(i_sel);
    const std::vector<float>* qi = i_sel < n ? &qi_sel : nullptr;
    for (std::size_t t = 0; t < n; ++t) {
      if (alpha[t] <= 0.0) continue;
      gmax2 = std::max(gmax2, grad[t]);
      const double diff = gmax + grad[t];
      if (qi && diff > 0.0) {
        double quad = 2.0 - 2.0 * (*qi)[t];  // K(i,i) = K(t,t) = 1
        if (quad <= 0.0) quad = kTau;
        const double obj = -(diff * diff) / quad;
        if (obj <= best) {
          best = obj;
          j_sel = t;
        }
      }
    }
    if (gmax + gmax2 < options.tolerance || i_sel == n || j_sel == n) break;

    const std::size_t i = i_sel, j = j_sel;
    // Copies: fetching one row may evict the other.
    const std::vector<float> qi_row = q.row(i);
    const std::vector<float> qj = q.row(j);
    double quad = 2.0 - 2.0 * qi_row[j];
    if (quad <= 0.0) quad = kTau;
    const double old_i = alpha[i], old_j = alpha[j];
    const double delta = (grad[i] - grad[j]) / quad;
    const double sum = alpha[i] + alpha[j];
    alpha[i] -= delta;
    alpha[j] += delta;
    if (sum > 1.0) {
      if (alpha[i] > 1.0) {
        alpha[i] = 1.0;
        alpha[j] = sum - 1.0;
      }
    } else if (alpha[j] < 0.0) {
      alpha[j] = 0.0;
      alpha[i] = sum;
    }
    if (sum > 1.0) {
      if (alpha[j] > 1.0) {
        alpha[j] = 1.0;
        alpha[i] = sum - 1.0;
      }
    } else if (alpha[i] < 0.0) {
      alpha[i] = 0.0;
      alpha[j] = sum;
    }
    const double di = alpha[i] - old_i, dj = alpha[j] - old_j;
    for (std::size_t t = 0; t < n; ++t) grad[t] += qi_row[t] * di + qj[t] * dj;
  }

  // rho from free variables, else midpoint of the feasible interval.
  double ub = std::numeric_limits<double>::infinity();
  double lb = -std::numeric_limits<double>::infinity();
  double sum_free = 0.0;
  std::size_t n_free = 0;
  for (std::size_t t = 0; t < n; ++t) {
    if (alpha[t] >= 1.0) {
      lb = std::max(lb, grad[t]);
    } else if (alpha[t] <= 0.0) {
      ub = std::min(ub, grad[t]);
    } else {
      ++n_free;
      sum_free += grad[t];
    }
  }

  OneClassSvm model;
  model.rho_ = n_free > 0 ? sum_free / static_cast<double>(n_free) : (ub + lb) / 2.0;
  model.gamma_ = gamma;
  model.nu_ = options.nu;
  model.iterations_ = iter;
  for (std::size_t t = 0; t < n; ++t) {
    if (alpha[t] > 0.0) {
      model.support_.push_back(data[t]);
      model.coef_.push_back(alpha[t]);
    }
  }
  return model;
}

double OneClassSvm::decision_function(const std::vector<float>& z) const {
  if (!fitted()) throw StateError("one-class SVM is not fitted");
  if (z.size() != support_.front().size()) throw FormatError("feature length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < support_.size(); ++i) s += coef_[i] * std::exp(-gamma_ * squared_distance(support_[i], z));
  return s - rho_;
}

nlohmann::json OneClassSvm::to_json() const {
  return nlohmann::json{{"kernel", "rbf"},   {"gamma", gamma_},     {"rho", rho_},
                        {"nu", nu_},         {"support", support_}, {"coef", coef_},
                        {"iterations", iterations_}};
}

OneClassSvm OneClassSvm::from_json(const nlohmann::json& j) {
  OneClassSvm m;
  m.gamma_ = j.at("gamma").get<double>();
  m.rho_ = j.at("rho").get<double>();
  m.nu_ = j.at("nu").get<double>();
  m.support_ = j.at("support").get<std::vector<std::vector<float>>>();
  m.coef_ = j.at("coef").get<std::vector<double>>();
  m.iterations_ = j.value("iterations", std::size_t{0});
  if (m.support_.size() != m.coef_.size()) throw IntegrityError("one-class SVM state is inconsistent");
  return m;
}

}  // namespace rarecell
