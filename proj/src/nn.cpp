// Copyright (c) 2026 the itervc authors
// SPDX-License-Identifier: Apache-2.0

#include "itervc/nn.hpp"

#include <cmath>

namespace itervc::nn {

namespace {

Mat gaussian(int rows, int cols, Rng& rng, double scale) {
  Mat m(rows, cols);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) m(r, c) = scale * rng.normal();
  return m;
}

}  // namespace

Linear Linear::init(int in, int out, Rng& rng, double scale) {
  Linear l;
  l.W = gaussian(in, out, rng, scale / std::sqrt(static_cast<double>(in)));
  l.b = Mat::Zero(1, out);
  return l;
}

Linear Linear::zeros_like() const {
  Linear g;
  g.W = Mat::Zero(W.rows(), W.cols());
  g.b = Mat::Zero(1, b.cols());
  return g;
}

Mat Linear::backward(const Mat& x, const Mat& dy, Linear* g) const {
  if (g) {
    g->W += x.transpose() * dy;
    g->b += dy.colwise().sum();
  }
  return dy * W.transpose();
}

void Linear::visit(const std::string& prefix, const ParamVisitor& fn) {
  fn(prefix + ".W", W);
  fn(prefix + ".b", b);
}

Conv1d Conv1d::init(int in, int out, int kernel, Rng& rng) {
  if (kernel % 2 == 0) throw Error("Conv1d: kernel must be odd");
  Conv1d c;
  c.kernel = kernel;
  c.in_ch = in;
  c.out_ch = out;
  c.W = gaussian(kernel * in, out, rng, 1.0 / std::sqrt(static_cast<double>(kernel * in)));
  c.b = Mat::Zero(1, out);
  return c;
}

Conv1d Conv1d::zeros_like() const {
  Conv1d g;
  g.kernel = kernel;
  g.in_ch = in_ch;
  g.out_ch = out_ch;
  g.W = Mat::Zero(W.rows(), W.cols());
  g.b = Mat::Zero(1, b.cols());
  return g;
}

Mat Conv1d::im2col(const Mat& x) const {
  const auto T = x.rows();
  const int pad = (kernel - 1) / 2;
  Mat cols = Mat::Zero(T, static_cast<Eigen::Index>(kernel) * in_ch);
  for (int j = 0; j < kernel; ++j) {
    const long shift = j - pad;
    const long lo = std::max(0L, -shift);
    const long hi = std::min(static_cast<long>(T), static_cast<long>(T) - shift);
    if (hi <= lo) continue;
    cols.block(lo, static_cast<Eigen::Index>(j) * in_ch, hi - lo, in_ch) =
        x.block(lo + shift, 0, hi - lo, in_ch);
  }
  return cols;
}

Mat Conv1d::backward(const Mat& x, const Mat& dy, Conv1d* g) const {
  const auto T = x.rows();
  const int pad = (kernel - 1) / 2;
  const Mat cols = im2col(x);
  if (g) {
    g->W += cols.transpose() * dy;
    g->b += dy.colwise().sum();
  }
  const Mat dcols = dy * W.transpose();
  Mat dx = Mat::Zero(T, in_ch);
  for (int j = 0; j < kernel; ++j) {
    const long shift = j - pad;
    const long lo = std::max(0L, -shift);
    const long hi = std::min(static_cast<long>(T), static_cast<long>(T) - shift);
    if (hi <= lo) continue;
    dx.block(lo + shift, 0, hi - lo, in_ch) +=
        dcols.block(lo, static_cast<Eigen::Index>(j) * in_ch, hi - lo, in_ch);
  }
  return dx;
}

void Conv1d::visit(const std::string& prefix, const ParamVisitor& fn) {
  fn(prefix + ".W", W);
  fn(prefix + ".b", b);
}

LayerNorm LayerNorm::init(int ch) {
  LayerNorm l;
  l.gamma = Mat::Ones(1, ch);
  l.beta = Mat::Zero(1, ch);
  return l;
}

LayerNorm LayerNorm::zeros_like() const {
  LayerNorm g;
  g.gamma = Mat::Zero(1, gamma.cols());
  g.beta = Mat::Zero(1, beta.cols());
  g.eps = eps;
  return g;
}

Mat LayerNorm::forward(const Mat& x, Cache& c) const {
  const auto T = x.rows();
  const auto C = x.cols();
  c.xhat.resize(T, C);
  c.inv_std.resize(T);
  for (Eigen::Index t = 0; t < T; ++t) {
    const double mu = x.row(t).mean();
    const double var = (x.row(t).array() - mu).square().mean();
    const double inv = 1.0 / std::sqrt(var + eps);
    c.inv_std(t) = inv;
    c.xhat.row(t) = (x.row(t).array() - mu) * inv;
  }
  return (c.xhat.array().rowwise() * gamma.row(0).array()).matrix().rowwise() + beta.row(0);
}

Mat LayerNorm::backward(const Mat& dy, const Cache& c, LayerNorm* g) const {
  const auto T = dy.rows();
  const auto C = dy.cols();
  if (g) {
    g->gamma += (dy.array() * c.xhat.array()).matrix().colwise().sum();
    g->beta += dy.colwise().sum();
  }
  Mat dx(T, C);
  for (Eigen::Index t = 0; t < T; ++t) {
    const Eigen::ArrayXXd dxhat = dy.row(t).array() * gamma.row(0).array();
    const Eigen::ArrayXXd xh = c.xhat.row(t).array();
    const double m1 = dxhat.mean();
    const double m2 = (dxhat * xh).mean();
    dx.row(t) = ((dxhat - m1 - xh * m2) * c.inv_std(t)).matrix();
  }
  return dx;
}

void LayerNorm::visit(const std::string& prefix, const ParamVisitor& fn) {
  fn(prefix + ".gamma", gamma);
  fn(prefix + ".beta", beta);
}

Mat tanh_forward(const Mat& x) { return x.array().tanh().matrix(); }

Mat tanh_backward(const Mat& dy, const Mat& y) {
  return (dy.array() * (1.0 - y.array().square())).matrix();
}

BiRnn BiRnn::init(int in, int out, Rng& rng) {
  if (out % 2 != 0) throw Error("BiRnn: output width must be even");
  const int h = out / 2;
  auto make_cell = [&]() {
    Cell c;
    c.Wx = gaussian(in, h, rng, 1.0 / std::sqrt(static_cast<double>(in)));
    c.Wh = gaussian(h, h, rng, 0.5 / std::sqrt(static_cast<double>(h)));
    c.b = Mat::Zero(1, h);
    return c;
  };
  BiRnn r;
  r.fwd = make_cell();
  r.bwd = make_cell();
  return r;
}

BiRnn BiRnn::zeros_like() const {
  auto zero_cell = [](const Cell& c) {
    Cell z;
    z.Wx = Mat::Zero(c.Wx.rows(), c.Wx.cols());
    z.Wh = Mat::Zero(c.Wh.rows(), c.Wh.cols());
    z.b = Mat::Zero(1, c.b.cols());
    return z;
  };
  BiRnn g;
  g.fwd = zero_cell(fwd);
  g.bwd = zero_cell(bwd);
  return g;
}

Mat BiRnn::forward(const Mat& x, Cache& c) const {
  const auto T = x.rows();
  const auto h = fwd.Wh.rows();
  c.x = x;
  c.h_fwd.setZero(T, h);
  c.h_bwd.setZero(T, h);

  Mat prev = Mat::Zero(1, h);
  for (Eigen::Index t = 0; t < T; ++t) {
    prev = (x.row(t) * fwd.Wx + prev * fwd.Wh + fwd.b).array().tanh().matrix();
    c.h_fwd.row(t) = prev;
  }
  prev = Mat::Zero(1, h);
  for (Eigen::Index t = T - 1; t >= 0; --t) {
    prev = (x.row(t) * bwd.Wx + prev * bwd.Wh + bwd.b).array().tanh().matrix();
    c.h_bwd.row(t) = prev;
  }
  Mat out(T, 2 * h);
  out.leftCols(h) = c.h_fwd;
  out.rightCols(h) = c.h_bwd;
  return out;
}

Mat BiRnn::backward(const Mat& dy, const Cache& c, BiRnn* g) const {
  const auto T = c.x.rows();
  const auto h = fwd.Wh.rows();
  Mat dx = Mat::Zero(T, c.x.cols());

  // Forward direction: backprop through time from T-1 down to 0.
  Mat carry = Mat::Zero(1, h);
  for (Eigen::Index t = T - 1; t >= 0; --t) {
    Mat dh = dy.row(t).leftCols(h) + carry;
    const Mat dpre = (dh.array() * (1.0 - c.h_fwd.row(t).array().square())).matrix();
    if (g) {
      g->fwd.Wx += c.x.row(t).transpose() * dpre;
      if (t > 0) g->fwd.Wh += c.h_fwd.row(t - 1).transpose() * dpre;
      g->fwd.b += dpre;
    }
    dx.row(t) += dpre * fwd.Wx.transpose();
    carry = dpre * fwd.Wh.transpose();
  }

  // Backward direction: its recurrence runs T-1 -> 0, so backprop runs 0 -> T-1.
  carry = Mat::Zero(1, h);
  for (Eigen::Index t = 0; t < T; ++t) {
    Mat dh = dy.row(t).rightCols(h) + carry;
    const Mat dpre = (dh.array() * (1.0 - c.h_bwd.row(t).array().square())).matrix();
    if (g) {
      g->bwd.Wx += c.x.row(t).transpose() * dpre;
      if (t < T - 1) g->bwd.Wh += c.h_bwd.row(t + 1).transpose() * dpre;
      g->bwd.b += dpre;
    }
    dx.row(t) += dpre * bwd.Wx.transpose();
    carry = dpre * bwd.Wh.transpose();
  }
  return dx;
}

void BiRnn::visit(const std::string& prefix, const ParamVisitor& fn) {
  fn(prefix + ".fwd.Wx", fwd.Wx);
  fn(prefix + ".fwd.Wh", fwd.Wh);
  fn(prefix + ".fwd.b", fwd.b);
  fn(prefix + ".bwd.Wx", bwd.Wx);
  fn(prefix + ".bwd.Wh", bwd.Wh);
  fn(prefix + ".bwd.b", bwd.b);
}

Film Film::init(int embed_dim, int ch) {
  Film f;
  f.Wg = Mat::Zero(embed_dim, ch);
  f.bg = Mat::Zero(1, ch);
  f.Wb = Mat::Zero(embed_dim, ch);
  f.bb = Mat::Zero(1, ch);
  return f;
}

Film Film::zeros_like() const {
  Film g;
  g.Wg = Mat::Zero(Wg.rows(), Wg.cols());
  g.bg = Mat::Zero(1, bg.cols());
  g.Wb = Mat::Zero(Wb.rows(), Wb.cols());
  g.bb = Mat::Zero(1, bb.cols());
  return g;
}

Mat Film::forward(const Mat& x, const Mat& cond) const {
  const Mat scale = cond * Wg + bg;
  const Mat shift = cond * Wb + bb;
  return ((x.array().rowwise() * (1.0 + scale.row(0).array())).matrix()).rowwise() + shift.row(0);
}

Mat Film::backward(const Mat& x, const Mat& cond, const Mat& dy, Film* g) const {
  const Mat scale = cond * Wg + bg;
  if (g) {
    const Mat dscale = (dy.array() * x.array()).matrix().colwise().sum();
    const Mat dshift = dy.colwise().sum();
    g->Wg += cond.transpose() * dscale;
    g->bg += dscale;
    g->Wb += cond.transpose() * dshift;
    g->bb += dshift;
  }
  return (dy.array().rowwise() * (1.0 + scale.row(0).array())).matrix();
}

void Film::visit(const std::string& prefix, const ParamVisitor& fn) {
  fn(prefix + ".Wg", Wg);
  fn(prefix + ".bg", bg);
  fn(prefix + ".Wb", Wb);
  fn(prefix + ".bb", bb);
}

Mat l2_normalize(const Mat& v) {
  const double n = std::max(v.norm(), 1e-12);
  return v / n;
}

Mat l2_normalize_backward(const Mat& v, const Mat& dy) {
  const double n = std::max(v.norm(), 1e-12);
  const Mat y = v / n;
  const double dot = (y.array() * dy.array()).sum();
  return (dy - dot * y) / n;
}

double cross_entropy(const Mat& logits, int target, Mat* dlogits) {
  const double mx = logits.maxCoeff();
  const Eigen::ArrayXXd e = (logits.array() - mx).exp();
  const double z = e.sum();
  const double loss = std::log(z) - (logits(0, target) - mx);
  if (dlogits) {
    *dlogits = (e / z).matrix();
    (*dlogits)(0, target) -= 1.0;
  }
  return loss;
}

Adam::Adam(AdamConfig config, std::vector<Mat*> params, std::vector<Mat*> grads)
    : cfg_(config), params_(std::move(params)), grads_(std::move(grads)) {
  if (params_.size() != grads_.size()) throw Error("Adam: param/grad count mismatch");
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (auto* p : params_) {
    m_.push_back(Mat::Zero(p->rows(), p->cols()));
    v_.push_back(Mat::Zero(p->rows(), p->cols()));
  }
}

void Adam::step() {
  ++t_;
  double lr = cfg_.lr;
  if (cfg_.warmup_steps > 0 && t_ < cfg_.warmup_steps)
    lr *= static_cast<double>(t_) / cfg_.warmup_steps;

  if (cfg_.grad_clip > 0) {
    double sq = 0.0;
    for (auto* g : grads_) sq += g->squaredNorm();
    const double norm = std::sqrt(sq);
    if (norm > cfg_.grad_clip) {
      const double s = cfg_.grad_clip / norm;
      for (auto* g : grads_) *g *= s;
    }
  }

  const double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
  const double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
  for (size_t i = 0; i < params_.size(); ++i) {
    Mat& m = m_[i];
    Mat& v = v_[i];
    const Mat& g = *grads_[i];
    m = cfg_.beta1 * m + (1.0 - cfg_.beta1) * g;
    v = cfg_.beta2 * v + (1.0 - cfg_.beta2) * g.array().square().matrix();
    params_[i]->array() -=
        lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + cfg_.eps);
  }
}

void Adam::zero_grads() {
  for (auto* g : grads_) g->setZero();
}

}  // namespace itervc::nn
