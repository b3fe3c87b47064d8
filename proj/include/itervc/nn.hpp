// Copyright (c) 2026 the itervc authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "itervc/common.hpp"

#include <functional>

namespace itervc::nn {

using itervc::Mat;

// All layers operate on time-major matrices (rows = frames, cols = channels)
// in double precision. Each layer type is its own gradient container: the
// gradient of a Linear is another Linear of the same shapes. visit() walks
// parameters in a fixed order, which fixes initialization, optimizer and
// serialization order.

using ParamVisitor = std::function<void(const std::string&, Mat&)>;

struct Linear {
  Mat W;  // in x out
  Mat b;  // 1 x out

  static Linear init(int in, int out, Rng& rng, double scale = 1.0);
  Linear zeros_like() const;

  Mat forward(const Mat& x) const { return (x * W).rowwise() + b.row(0); }
  // Returns dx; accumulates parameter gradients into *g when g != nullptr.
  Mat backward(const Mat& x, const Mat& dy, Linear* g) const;

  void visit(const std::string& prefix, const ParamVisitor& fn);
};

// Temporal convolution with same-padding; kernel must be odd.
struct Conv1d {
  int kernel = 5;
  int in_ch = 0;
  int out_ch = 0;
  Mat W;  // (kernel*in_ch) x out_ch
  Mat b;  // 1 x out_ch

  static Conv1d init(int in, int out, int kernel, Rng& rng);
  Conv1d zeros_like() const;

  Mat im2col(const Mat& x) const;
  Mat forward(const Mat& x) const { return (im2col(x) * W).rowwise() + b.row(0); }
  Mat backward(const Mat& x, const Mat& dy, Conv1d* g) const;

  void visit(const std::string& prefix, const ParamVisitor& fn);
};

struct LayerNorm {
  Mat gamma;  // 1 x ch
  Mat beta;   // 1 x ch
  double eps = 1e-5;

  struct Cache {
    Mat xhat;
    Vec inv_std;
  };

  static LayerNorm init(int ch);
  LayerNorm zeros_like() const;

  Mat forward(const Mat& x, Cache& c) const;
  Mat backward(const Mat& dy, const Cache& c, LayerNorm* g) const;

  void visit(const std::string& prefix, const ParamVisitor& fn);
};

// y = tanh(x); cache is y itself.
Mat tanh_forward(const Mat& x);
Mat tanh_backward(const Mat& dy, const Mat& y);

// Single-layer bidirectional tanh RNN; output is [h_fwd, h_bwd] with
// hidden size out/2 per direction.
struct BiRnn {
  struct Cell {
    Mat Wx;  // in x h
    Mat Wh;  // h x h
    Mat b;   // 1 x h
  };
  Cell fwd, bwd;

  struct Cache {
    Mat x;
    Mat h_fwd;  // T x h
    Mat h_bwd;  // T x h
  };

  static BiRnn init(int in, int out, Rng& rng);
  BiRnn zeros_like() const;

  Mat forward(const Mat& x, Cache& c) const;
  Mat backward(const Mat& dy, const Cache& c, BiRnn* g) const;

  void visit(const std::string& prefix, const ParamVisitor& fn);
};

// Per-channel affine modulation from a conditioning row vector:
// y = x .* (1 + cond*Wg + bg) + (cond*Wb + bb), broadcast over frames.
struct Film {
  Mat Wg, bg;  // e x ch, 1 x ch
  Mat Wb, bb;

  static Film init(int embed_dim, int ch);
  Film zeros_like() const;

  Mat forward(const Mat& x, const Mat& cond) const;
  Mat backward(const Mat& x, const Mat& cond, const Mat& dy, Film* g) const;

  void visit(const std::string& prefix, const ParamVisitor& fn);
};

// Mean over frames: T x C -> 1 x C.
inline Mat mean_pool(const Mat& x) { return x.colwise().mean(); }
inline Mat mean_pool_backward(const Mat& dy, Eigen::Index frames) {
  return (Mat::Ones(frames, 1) / static_cast<double>(frames)) * dy;
}

// L2 normalization of a 1 x C row vector.
Mat l2_normalize(const Mat& v);
Mat l2_normalize_backward(const Mat& v, const Mat& dy);

// Cross entropy with integrated softmax over one row of logits.
double cross_entropy(const Mat& logits, int target, Mat* dlogits);

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int warmup_steps = 0;  // linear warmup on the learning rate
  double grad_clip = 5.0;
};

// Adam over an explicit (param, grad) list; list order must be stable.
class Adam {
 public:
  Adam(AdamConfig config, std::vector<Mat*> params, std::vector<Mat*> grads);

  void step();
  void zero_grads();
  int steps_taken() const { return t_; }

 private:
  AdamConfig cfg_;
  std::vector<Mat*> params_;
  std::vector<Mat*> grads_;
  std::vector<Mat> m_, v_;
  int t_ = 0;
};

// Collects visit()-ordered parameter pointers of a model and its gradient
// mirror for the optimizer.
template <typename Net>
std::pair<std::vector<Mat*>, std::vector<Mat*>> param_grad_pairs(Net& net, Net& grads) {
  std::vector<Mat*> p, g;
  net.visit("", [&](const std::string&, Mat& m) { p.push_back(&m); });
  grads.visit("", [&](const std::string&, Mat& m) { g.push_back(&m); });
  return {p, g};
}

// Parameter checksum over the exact bit patterns, for freezing contracts.
template <typename Net>
uint64_t param_checksum(Net& net) {
  uint64_t h = 0xcbf29ce484222325ull;
  net.visit("", [&](const std::string& name, Mat& m) {
    h = fnv1a64(name, h);
    h = fnv1a64(m.data(), sizeof(double) * static_cast<size_t>(m.size()), h);
  });
  return h;
}

}  // namespace itervc::nn
