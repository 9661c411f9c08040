#pragma once

// Minimal dense/conv/norm layer kit with explicit forward caches and
// hand-written backward passes. Layers operate on (channels x length)
// matrices; parameters live in an external flat vector and are addressed
// through Eigen maps.

#include "trajdiff/common.hpp"

namespace trajdiff::nn {

using MapM = Eigen::Map<Mat>;
using MapV = Eigen::Map<Vec>;
using CMapM = Eigen::Map<const Mat>;
using CMapV = Eigen::Map<const Vec>;

inline double silu(double x) { return x / (1.0 + std::exp(-x)); }

inline Vec silu(const Vec& x) {
  return x.unaryExpr([](double v) { return silu(v); });
}

inline Mat silu(const Mat& x) {
  return x.unaryExpr([](double v) { return silu(v); });
}

// d silu / dx = s(x) (1 + x (1 - s(x)))
template <typename T>
T silu_grad_times(const T& x, const T& dy) {
  return dy.binaryExpr(x, [](double g, double v) {
    const double s = 1.0 / (1.0 + std::exp(-v));
    return g * s * (1.0 + v * (1.0 - s));
  });
}

// ---------------------------------------------------------------------------
// Dense: y = W x + b

struct DenseCache {
  Vec x;
};

inline Vec dense_forward(CMapM W, CMapV b, const Vec& x, DenseCache& cache) {
  cache.x = x;
  return W * x + b;
}

// Accumulates parameter gradients, returns d loss / d x.
inline Vec dense_backward(CMapM W, MapM dW, MapV db, const DenseCache& cache,
                          const Vec& dy) {
  dW.noalias() += dy * cache.x.transpose();
  db += dy;
  return W.transpose() * dy;
}

// ---------------------------------------------------------------------------
// Conv1d, kernel 3, zero padding 1, stride 1 or 2.
//
// Weights are (c_out x 3 c_in); column block t*c_in..t*c_in+c_in-1 holds the
// tap at offset t - 1. out_len = floor((len - 1) / stride) + 1.

inline int conv_out_len(int len, int stride) { return (len - 1) / stride + 1; }

struct ConvCache {
  Mat cols;  // im2col matrix (3 c_in x out_len)
  int in_len = 0;
  int stride = 1;
};

inline Mat conv1d_forward(CMapM W, CMapV b, const Mat& in, int stride,
                          ConvCache& cache) {
  const int c_in = static_cast<int>(in.rows());
  const int len = static_cast<int>(in.cols());
  const int out_len = conv_out_len(len, stride);
  cache.in_len = len;
  cache.stride = stride;
  cache.cols.setZero(3 * c_in, out_len);
  for (int j = 0; j < out_len; ++j) {
    const int center = j * stride;
    for (int t = 0; t < 3; ++t) {
      const int i = center + t - 1;
      if (i >= 0 && i < len) cache.cols.block(t * c_in, j, c_in, 1) = in.col(i);
    }
  }
  Mat out = W * cache.cols;
  out.colwise() += b;
  return out;
}

inline Mat conv1d_backward(CMapM W, MapM dW, MapV db, const ConvCache& cache,
                           const Mat& dy) {
  dW.noalias() += dy * cache.cols.transpose();
  db += dy.rowwise().sum();
  const Mat dcols = W.transpose() * dy;
  const int c_in = static_cast<int>(dcols.rows()) / 3;
  Mat din = Mat::Zero(c_in, cache.in_len);
  for (int j = 0; j < dy.cols(); ++j) {
    const int center = j * cache.stride;
    for (int t = 0; t < 3; ++t) {
      const int i = center + t - 1;
      if (i >= 0 && i < cache.in_len)
        din.col(i) += dcols.block(t * c_in, j, c_in, 1);
    }
  }
  return din;
}

// ---------------------------------------------------------------------------
// GroupNorm over (channels_per_group x length) with per-channel affine.

constexpr double kGnEps = 1e-5;

inline int group_count(int channels) {
  for (int g = std::min(8, channels); g >= 1; --g)
    if (channels % g == 0) return g;
  return 1;
}

struct GroupNormCache {
  Mat xhat;
  Vec inv_std;  // per group
};

inline Mat group_norm_forward(CMapV gamma, CMapV beta, const Mat& x,
                              GroupNormCache& cache) {
  const int c = static_cast<int>(x.rows());
  const int len = static_cast<int>(x.cols());
  const int groups = group_count(c);
  const int cg = c / groups;
  cache.xhat.resize(c, len);
  cache.inv_std.resize(groups);
  for (int g = 0; g < groups; ++g) {
    auto blk = x.middleRows(g * cg, cg);
    const double mean = blk.mean();
    const double var = (blk.array() - mean).square().mean();
    const double inv = 1.0 / std::sqrt(var + kGnEps);
    cache.inv_std[g] = inv;
    cache.xhat.middleRows(g * cg, cg) = (blk.array() - mean) * inv;
  }
  Mat out = cache.xhat;
  out.array().colwise() *= gamma.array();
  out.array().colwise() += beta.array();
  return out;
}

inline Mat group_norm_backward(CMapV gamma, MapV dgamma, MapV dbeta,
                               const GroupNormCache& cache, const Mat& dy) {
  const int c = static_cast<int>(dy.rows());
  const int len = static_cast<int>(dy.cols());
  const int groups = static_cast<int>(cache.inv_std.size());
  const int cg = c / groups;
  dgamma += (dy.array() * cache.xhat.array()).rowwise().sum().matrix();
  dbeta += dy.rowwise().sum();
  Mat dxhat = dy;
  dxhat.array().colwise() *= gamma.array();
  Mat dx(c, len);
  const double m = static_cast<double>(cg) * len;
  for (int g = 0; g < groups; ++g) {
    auto dxh = dxhat.middleRows(g * cg, cg);
    auto xh = cache.xhat.middleRows(g * cg, cg);
    const double sum_dxh = dxh.sum();
    const double sum_dxh_xh = (dxh.array() * xh.array()).sum();
    dx.middleRows(g * cg, cg) =
        (cache.inv_std[g] / m) *
        (m * dxh.array() - sum_dxh - xh.array() * sum_dxh_xh).matrix();
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Nearest-neighbor upsample from len to target (target <= 2 len).

inline Mat upsample_forward(const Mat& in, int target) {
  Mat out(in.rows(), target);
  for (int j = 0; j < target; ++j)
    out.col(j) = in.col(std::min<int>(j / 2, static_cast<int>(in.cols()) - 1));
  return out;
}

inline Mat upsample_backward(const Mat& dout, int source_len) {
  Mat din = Mat::Zero(dout.rows(), source_len);
  for (int j = 0; j < dout.cols(); ++j)
    din.col(std::min<int>(j / 2, source_len - 1)) += dout.col(j);
  return din;
}

// ---------------------------------------------------------------------------
// Sinusoidal step embedding (dim must be even).

inline Vec sinusoidal_embedding(int k, int dim) {
  const int half = dim / 2;
  Vec pe(dim);
  for (int i = 0; i < half; ++i) {
    const double freq =
        std::exp(-std::log(10000.0) * i / std::max(1, half - 1));
    pe[i] = std::sin(k * freq);
    pe[half + i] = std::cos(k * freq);
  }
  return pe;
}

}  // namespace trajdiff::nn
