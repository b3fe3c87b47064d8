// Copyright (c) 2026 the itervc authors
// SPDX-License-Identifier: Apache-2.0

#include "itervc/ctc.hpp"

#include <cmath>
#include <limits>

namespace itervc {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double lse2(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  const double m = std::max(a, b);
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}

}  // namespace

double ctc_loss(const Mat& logits, const std::vector<int>& target, int blank_index, Mat* dlogits) {
  const auto T = logits.rows();
  const auto K = logits.cols();
  const auto L = static_cast<Eigen::Index>(target.size());
  if (blank_index < 0 || blank_index >= K) throw Error("ctc_loss: blank index out of range");
  for (int tok : target) {
    if (tok < 0 || tok >= K) throw Error("ctc_loss: target symbol out of range");
    if (tok == blank_index) throw Error("ctc_loss: target contains the blank symbol");
  }
  if (L > T)
    throw Error("ctc_loss: transcript length " + std::to_string(L) + " exceeds frame count " +
                std::to_string(T));

  // Row-wise log-softmax.
  Mat logp(T, K);
  for (Eigen::Index t = 0; t < T; ++t) {
    const double mx = logits.row(t).maxCoeff();
    const double z = std::log((logits.row(t).array() - mx).exp().sum());
    logp.row(t) = logits.row(t).array() - mx - z;
  }

  // Extended label sequence: blank, l1, blank, l2, ..., blank.
  const Eigen::Index S = 2 * L + 1;
  std::vector<int> lab(static_cast<size_t>(S));
  for (Eigen::Index s = 0; s < S; ++s)
    lab[static_cast<size_t>(s)] = (s % 2 == 1) ? target[static_cast<size_t>((s - 1) / 2)] : blank_index;
  auto can_skip = [&](Eigen::Index s) {
    return s >= 2 && lab[static_cast<size_t>(s)] != blank_index &&
           lab[static_cast<size_t>(s)] != lab[static_cast<size_t>(s - 2)];
  };

  Mat alpha = Mat::Constant(T, S, kNegInf);
  alpha(0, 0) = logp(0, lab[0]);
  if (S > 1) alpha(0, 1) = logp(0, lab[1]);
  for (Eigen::Index t = 1; t < T; ++t) {
    for (Eigen::Index s = 0; s < S; ++s) {
      double a = alpha(t - 1, s);
      if (s >= 1) a = lse2(a, alpha(t - 1, s - 1));
      if (can_skip(s)) a = lse2(a, alpha(t - 1, s - 2));
      if (a != kNegInf) alpha(t, s) = a + logp(t, lab[static_cast<size_t>(s)]);
    }
  }

  const double log_z = S > 1 ? lse2(alpha(T - 1, S - 1), alpha(T - 1, S - 2)) : alpha(T - 1, S - 1);
  if (log_z == kNegInf) {
    // No feasible alignment; the gradient is undefined, report zero.
    if (dlogits) dlogits->setZero(T, K);
    return std::numeric_limits<double>::infinity();
  }

  if (dlogits) {
    Mat beta = Mat::Constant(T, S, kNegInf);
    beta(T - 1, S - 1) = logp(T - 1, lab[static_cast<size_t>(S - 1)]);
    if (S > 1) beta(T - 1, S - 2) = logp(T - 1, lab[static_cast<size_t>(S - 2)]);
    for (Eigen::Index t = T - 2; t >= 0; --t) {
      for (Eigen::Index s = 0; s < S; ++s) {
        double b = beta(t + 1, s);
        if (s + 1 < S) b = lse2(b, beta(t + 1, s + 1));
        if (s + 2 < S && can_skip(s + 2)) b = lse2(b, beta(t + 1, s + 2));
        if (b != kNegInf) beta(t, s) = b + logp(t, lab[static_cast<size_t>(s)]);
      }
    }

    dlogits->resize(T, K);
    for (Eigen::Index t = 0; t < T; ++t) {
      // log mass of paths passing through (t, s); alpha and beta both include
      // logp(t, lab[s]), so subtract one copy.
      std::vector<double> logq(static_cast<size_t>(K), kNegInf);
      for (Eigen::Index s = 0; s < S; ++s) {
        if (alpha(t, s) == kNegInf || beta(t, s) == kNegInf) continue;
        const int k = lab[static_cast<size_t>(s)];
        const double occ = alpha(t, s) + beta(t, s) - logp(t, k);
        logq[static_cast<size_t>(k)] = lse2(logq[static_cast<size_t>(k)], occ);
      }
      for (Eigen::Index k = 0; k < K; ++k) {
        const double q =
            logq[static_cast<size_t>(k)] == kNegInf ? 0.0 : std::exp(logq[static_cast<size_t>(k)] - log_z);
        (*dlogits)(t, k) = std::exp(logp(t, k)) - q;
      }
    }
  }
  return -log_z;
}

}  // namespace itervc
