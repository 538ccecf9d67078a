#include "grit/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>

namespace grit::diff {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMat>;
using Map = Eigen::Map<RowMat>;

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

[[noreturn]] void shape_error(const char* op, const Shape& a, const Shape& b) {
  throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

[[noreturn]] void shape_error(const char* op, const Shape& a, const std::string& why) {
  throw std::invalid_argument(std::string(op) + ": invalid shape " + shape_str(a) + " (" + why + ")");
}

bool wants(const Tensor& t) { return t.requires_grad(); }

// Index of the broadcast operand for every element of the full-shape operand,
// or empty when the shapes are identical.
std::vector<std::size_t> broadcast_map(const char* op, const Shape& full, const Shape& small) {
  if (full == small) return {};
  if (small.size() > full.size()) shape_error(op, full, small);
  const std::size_t offset = full.size() - small.size();
  std::vector<std::size_t> small_stride(full.size(), 0);
  std::size_t stride = 1;
  for (std::size_t k = small.size(); k-- > 0;) {
    const auto fs = full[offset + k];
    if (small[k] != fs && small[k] != 1) shape_error(op, full, small);
    small_stride[offset + k] = small[k] == 1 ? 0 : stride;
    stride *= small[k];
  }
  const auto n = numel(full);
  std::vector<std::size_t> map(n);
  std::vector<std::size_t> idx(full.size(), 0);
  std::size_t pos = 0;
  for (std::size_t i = 0; i < n; ++i) {
    map[i] = pos;
    for (std::size_t k = full.size(); k-- > 0;) {
      ++idx[k];
      pos += small_stride[k];
      if (idx[k] < full[k]) break;
      pos -= small_stride[k] * idx[k];
      idx[k] = 0;
    }
  }
  return map;
}

enum class Binary { kAdd, kSub, kMul };

// How the second operand of a binary op is indexed: identical shape, a
// repeated trailing block (bias), one value per row of the last axis (mask),
// or a general precomputed map.
struct Broadcast {
  enum Kind { kSame, kTile, kRow, kMap } kind = kSame;
  std::size_t width = 1;
  std::vector<std::size_t> map;

  std::size_t operator()(std::size_t i) const {
    switch (kind) {
      case kSame:
        return i;
      case kTile:
        return i % width;
      case kRow:
        return i / width;
      default:
        return map[i];
    }
  }
};

Broadcast make_broadcast(const char* op, const Shape& full, const Shape& small) {
  Broadcast b;
  if (full == small) return b;
  if (small.size() <= full.size() && std::equal(small.begin(), small.end(), full.end() - small.size())) {
    b.kind = Broadcast::kTile;
    b.width = numel(small);
    return b;
  }
  if (small.size() == full.size() && small.back() == 1 && full.back() > 0 &&
      std::equal(small.begin(), small.end() - 1, full.begin())) {
    b.kind = Broadcast::kRow;
    b.width = full.back();
    return b;
  }
  b.kind = Broadcast::kMap;
  b.map = broadcast_map(op, full, small);
  return b;
}

template <class F>
void for_each_pair(const Broadcast& bc, std::size_t n, F&& f) {
  switch (bc.kind) {
    case Broadcast::kSame:
      for (std::size_t i = 0; i < n; ++i) f(i, i);
      break;
    case Broadcast::kTile:
      for (std::size_t i = 0; i < n; i += bc.width) {
        for (std::size_t j = 0; j < bc.width; ++j) f(i + j, j);
      }
      break;
    case Broadcast::kRow:
      for (std::size_t r = 0; r * bc.width < n; ++r) {
        for (std::size_t j = 0; j < bc.width; ++j) f(r * bc.width + j, r);
      }
      break;
    default:
      for (std::size_t i = 0; i < n; ++i) f(i, bc.map[i]);
  }
}

Tensor binary(const char* op, Binary kind, const Tensor& a, const Tensor& b) {
  auto bc = make_broadcast(op, a.shape(), b.shape());
  const auto av = a.values();
  const auto bv = b.values();
  const auto n = av.size();
  std::vector<double> out(n);
  double* o = out.data();
  const double* x = av.data();
  const double* y = bv.data();
  switch (kind) {
    case Binary::kAdd:
      for_each_pair(bc, n, [=](std::size_t i, std::size_t j) { o[i] = x[i] + y[j]; });
      break;
    case Binary::kSub:
      for_each_pair(bc, n, [=](std::size_t i, std::size_t j) { o[i] = x[i] - y[j]; });
      break;
    case Binary::kMul:
      for_each_pair(bc, n, [=](std::size_t i, std::size_t j) { o[i] = x[i] * y[j]; });
      break;
  }
  return record(op, a.shape(), std::move(out), {a, b},
                [kind, bc = std::move(bc)](const Tensor& o, std::span<const Tensor> in) {
                  const double* g = o.grad().data();
                  const auto n = o.numel();
                  if (wants(in[0])) {
                    double* ga = in[0].mutable_grad().data();
                    if (kind == Binary::kMul) {
                      const double* y = in[1].values().data();
                      for_each_pair(bc, n, [=](std::size_t i, std::size_t j) { ga[i] += g[i] * y[j]; });
                    } else {
                      for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
                    }
                  }
                  if (wants(in[1])) {
                    double* gb = in[1].mutable_grad().data();
                    if (kind == Binary::kMul) {
                      const double* x = in[0].values().data();
                      for_each_pair(bc, n, [=](std::size_t i, std::size_t j) { gb[j] += g[i] * x[i]; });
                    } else {
                      const double sign = kind == Binary::kSub ? -1.0 : 1.0;
                      for_each_pair(bc, n, [=](std::size_t i, std::size_t j) { gb[j] += sign * g[i]; });
                    }
                  }
                });
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_b) {
  if (a.rank() < 2 || b.rank() != 2) shape_error("matmul", a.shape(), b.shape());
  const auto k = a.shape().back();
  const auto rows = a.numel() / k;
  const auto bk = transpose_b ? b.dim(1) : b.dim(0);
  const auto n = transpose_b ? b.dim(0) : b.dim(1);
  if (bk != k) shape_error("matmul", a.shape(), b.shape());
  Shape out_shape = a.shape();
  out_shape.back() = n;
  std::vector<double> out(rows * n);
  MapC A(a.values().data(), rows, k);
  MapC B(b.values().data(), b.dim(0), b.dim(1));
  Map C(out.data(), rows, n);
  if (transpose_b) {
    C.noalias() = A * B.transpose();
  } else {
    C.noalias() = A * B;
  }
  return record("matmul", std::move(out_shape), std::move(out), {a, b},
                [rows, k, n, transpose_b](const Tensor& o, std::span<const Tensor> in) {
                  MapC G(o.grad().data(), rows, n);
                  MapC A(in[0].values().data(), rows, k);
                  MapC B(in[1].values().data(), in[1].dim(0), in[1].dim(1));
                  if (wants(in[0])) {
                    Map GA(in[0].mutable_grad().data(), rows, k);
                    if (transpose_b) {
                      GA.noalias() += G * B;
                    } else {
                      GA.noalias() += G * B.transpose();
                    }
                  }
                  if (wants(in[1])) {
                    Map GB(in[1].mutable_grad().data(), in[1].dim(0), in[1].dim(1));
                    if (transpose_b) {
                      GB.noalias() += G.transpose() * A;
                    } else {
                      GB.noalias() += A.transpose() * G;
                    }
                  }
                });
}

Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0)) shape_error("bmm", a.shape(), b.shape());
  const auto batch = a.dim(0);
  const auto m = a.dim(1);
  const auto k = a.dim(2);
  const auto bk = transpose_b ? b.dim(2) : b.dim(1);
  const auto n = transpose_b ? b.dim(1) : b.dim(2);
  if (bk != k) shape_error("bmm", a.shape(), b.shape());
  const auto br = b.dim(1);
  const auto bc = b.dim(2);
  std::vector<double> out(batch * m * n);
  for (std::size_t i = 0; i < batch; ++i) {
    MapC A(a.values().data() + i * m * k, m, k);
    MapC B(b.values().data() + i * br * bc, br, bc);
    Map C(out.data() + i * m * n, m, n);
    if (transpose_b) {
      C.noalias() = A * B.transpose();
    } else {
      C.noalias() = A * B;
    }
  }
  return record("bmm", {batch, m, n}, std::move(out), {a, b},
                [batch, m, k, n, br, bc, transpose_b](const Tensor& o, std::span<const Tensor> in) {
                  const bool ga_on = wants(in[0]);
                  const bool gb_on = wants(in[1]);
                  for (std::size_t i = 0; i < batch; ++i) {
                    MapC G(o.grad().data() + i * m * n, m, n);
                    MapC A(in[0].values().data() + i * m * k, m, k);
                    MapC B(in[1].values().data() + i * br * bc, br, bc);
                    if (ga_on) {
                      Map GA(in[0].mutable_grad().data() + i * m * k, m, k);
                      if (transpose_b) {
                        GA.noalias() += G * B;
                      } else {
                        GA.noalias() += G * B.transpose();
                      }
                    }
                    if (gb_on) {
                      Map GB(in[1].mutable_grad().data() + i * br * bc, br, bc);
                      if (transpose_b) {
                        GB.noalias() += G.transpose() * A;
                      } else {
                        GB.noalias() += A.transpose() * G;
                      }
                    }
                  }
                });
}

Tensor add(const Tensor& a, const Tensor& b) { return binary("add", Binary::kAdd, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary("sub", Binary::kSub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary("mul", Binary::kMul, a, b); }

Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out(a.values().begin(), a.values().end());
  for (auto& v : out) v *= factor;
  return record("scale", a.shape(), std::move(out), {a}, [factor](const Tensor& o, std::span<const Tensor> in) {
    const auto g = o.grad();
    auto ga = in[0].mutable_grad();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += factor * g[i];
  });
}

Tensor divide(const Tensor& a, double divisor) {
  if (divisor == 0.0) throw std::invalid_argument("divide: division by zero");
  std::vector<double> out(a.values().begin(), a.values().end());
  for (auto& v : out) v /= divisor;
  return record("divide", a.shape(), std::move(out), {a}, [divisor](const Tensor& o, std::span<const Tensor> in) {
    const auto g = o.grad();
    auto ga = in[0].mutable_grad();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / divisor;
  });
}

Tensor concat_last(std::span<const Tensor> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_last: no inputs");
  const auto& first = parts.front().shape();
  const auto rows = parts.front().numel() / first.back();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    const auto& s = p.shape();
    if (s.size() != first.size() || !std::equal(s.begin(), s.end() - 1, first.begin())) {
      shape_error("concat_last", first, s);
    }
    widths.push_back(s.back());
    total += s.back();
  }
  std::vector<double> out(rows * total);
  std::size_t col = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const auto v = parts[p].values();
    const auto w = widths[p];
    for (std::size_t r = 0; r < rows; ++r) std::copy_n(v.data() + r * w, w, out.data() + r * total + col);
    col += w;
  }
  Shape shape = first;
  shape.back() = total;
  return record("concat_last", std::move(shape), std::move(out), {parts.begin(), parts.end()},
                [rows, total, widths = std::move(widths)](const Tensor& o, std::span<const Tensor> in) {
                  const auto g = o.grad();
                  std::size_t col = 0;
                  for (std::size_t p = 0; p < in.size(); ++p) {
                    const auto w = widths[p];
                    if (wants(in[p])) {
                      auto gp = in[p].mutable_grad();
                      for (std::size_t r = 0; r < rows; ++r) {
                        for (std::size_t c = 0; c < w; ++c) gp[r * w + c] += g[r * total + col + c];
                      }
                    }
                    col += w;
                  }
                });
}

Tensor gather_rows(const Tensor& table, std::span<const std::int32_t> ids, Shape leading) {
  if (table.rank() != 2) shape_error("gather_rows", table.shape(), "table must be 2-D");
  if (numel(leading) != ids.size()) {
    throw std::invalid_argument("gather_rows: " + std::to_string(ids.size()) + " ids for leading shape " +
                                shape_str(leading));
  }
  const auto vocab = table.dim(0);
  const auto d = table.dim(1);
  std::vector<std::int32_t> idx(ids.begin(), ids.end());
  std::vector<double> out(idx.size() * d);
  const auto tv = table.values();
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || static_cast<std::size_t>(idx[i]) >= vocab) {
      throw std::out_of_range("gather_rows: id " + std::to_string(idx[i]) + " outside [0, " + std::to_string(vocab) +
                              ")");
    }
    std::copy_n(tv.data() + static_cast<std::size_t>(idx[i]) * d, d, out.data() + i * d);
  }
  leading.push_back(d);
  return record("gather_rows", std::move(leading), std::move(out), {table},
                [d, idx = std::move(idx)](const Tensor& o, std::span<const Tensor> in) {
                  const auto g = o.grad();
                  auto gt = in[0].mutable_grad();
                  for (std::size_t i = 0; i < idx.size(); ++i) {
                    auto* dst = gt.data() + static_cast<std::size_t>(idx[i]) * d;
                    const auto* src = g.data() + i * d;
                    for (std::size_t c = 0; c < d; ++c) dst[c] += src[c];
                  }
                });
}

Tensor softmax_last(const Tensor& x, const Tensor* additive_mask) {
  if (additive_mask && additive_mask->shape() != x.shape()) {
    shape_error("softmax_last", x.shape(), additive_mask->shape());
  }
  const auto d = x.shape().back();
  const auto rows = x.numel() / d;
  const auto xv = x.values();
  std::vector<double> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* src = xv.data() + r * d;
    const double* msk = additive_mask ? additive_mask->values().data() + r * d : nullptr;
    double* dst = out.data() + r * d;
    double mx = kNegInf;
    for (std::size_t c = 0; c < d; ++c) {
      dst[c] = msk ? src[c] + msk[c] : src[c];
      mx = std::max(mx, dst[c]);
    }
    if (mx == kNegInf) {
      std::fill_n(dst, d, 0.0);
      continue;
    }
    double total = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      dst[c] = dst[c] == kNegInf ? 0.0 : std::exp(dst[c] - mx);
      total += dst[c];
    }
    for (std::size_t c = 0; c < d; ++c) dst[c] /= total;
  }
  return record("softmax_last", x.shape(), std::move(out), {x}, [d, rows](const Tensor& o, std::span<const Tensor> in) {
    const auto g = o.grad();
    const auto p = o.values();
    auto gx = in[0].mutable_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      const auto off = r * d;
      double dot = 0.0;
      for (std::size_t c = 0; c < d; ++c) dot += p[off + c] * g[off + c];
      for (std::size_t c = 0; c < d; ++c) gx[off + c] += p[off + c] * (g[off + c] - dot);
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const auto d = x.shape().back();
  if (gain.shape() != Shape{d}) shape_error("layer_norm", x.shape(), gain.shape());
  if (bias.shape() != Shape{d}) shape_error("layer_norm", x.shape(), bias.shape());
  const auto rows = x.numel() / d;
  const auto xv = x.values();
  const auto gv = gain.values();
  const auto bv = bias.values();
  std::vector<double> out(x.numel());
  std::vector<double> xhat(x.numel());
  std::vector<double> rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* src = xv.data() + r * d;
    double mu = 0.0;
    for (std::size_t c = 0; c < d; ++c) mu += src[c];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t c = 0; c < d; ++c) var += (src[c] - mu) * (src[c] - mu);
    var /= static_cast<double>(d);
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < d; ++c) {
      const double h = (src[c] - mu) * rstd[r];
      xhat[r * d + c] = h;
      out[r * d + c] = h * gv[c] + bv[c];
    }
  }
  return record("layer_norm", x.shape(), std::move(out), {x, gain, bias},
                [d, rows, xhat = std::move(xhat), rstd = std::move(rstd)](const Tensor& o, std::span<const Tensor> in) {
                  const auto g = o.grad();
                  const auto gv = in[1].values();
                  if (wants(in[1]) || wants(in[2])) {
                    auto gg = in[1].mutable_grad();
                    auto gb = in[2].mutable_grad();
                    for (std::size_t r = 0; r < rows; ++r) {
                      for (std::size_t c = 0; c < d; ++c) {
                        gg[c] += g[r * d + c] * xhat[r * d + c];
                        gb[c] += g[r * d + c];
                      }
                    }
                  }
                  if (wants(in[0])) {
                    auto gx = in[0].mutable_grad();
                    const double inv_d = 1.0 / static_cast<double>(d);
                    for (std::size_t r = 0; r < rows; ++r) {
                      const auto off = r * d;
                      double mean_dh = 0.0;
                      double mean_dh_h = 0.0;
                      for (std::size_t c = 0; c < d; ++c) {
                        const double dh = g[off + c] * gv[c];
                        mean_dh += dh;
                        mean_dh_h += dh * xhat[off + c];
                      }
                      mean_dh *= inv_d;
                      mean_dh_h *= inv_d;
                      for (std::size_t c = 0; c < d; ++c) {
                        const double dh = g[off + c] * gv[c];
                        gx[off + c] += rstd[r] * (dh - mean_dh - xhat[off + c] * mean_dh_h);
                      }
                    }
                  }
                });
}

Tensor gelu(const Tensor& x) {
  const auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    out[i] = 0.5 * xv[i] * (1.0 + std::erf(xv[i] * std::numbers::sqrt2 / 2.0));
  }
  return record("gelu", x.shape(), std::move(out), {x}, [](const Tensor& o, std::span<const Tensor> in) {
    const auto g = o.grad();
    const auto xv = in[0].values();
    auto gx = in[0].mutable_grad();
    const double inv_sqrt_2pi = 0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2;
    for (std::size_t i = 0; i < xv.size(); ++i) {
      const double v = xv[i];
      const double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
      const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
      gx[i] += g[i] * (cdf + v * pdf);
    }
  });
}

Tensor dropout(const Tensor& x, double rate, bool training, std::mt19937_64& rng) {
  if (!(rate >= 0.0 && rate < 1.0)) throw std::invalid_argument("dropout: rate must lie in [0, 1)");
  if (!training || rate == 0.0) return x;
  const double keep = 1.0 - rate;
  // An element survives when a uniform 64-bit draw falls below keep * 2^64.
  const auto threshold = static_cast<std::uint64_t>(std::ldexp(keep, 64));
  const auto xv = x.values();
  std::vector<double> factor(xv.size());
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    factor[i] = rng() < threshold ? 1.0 / keep : 0.0;
    out[i] = xv[i] * factor[i];
  }
  return record("dropout", x.shape(), std::move(out), {x},
                [factor = std::move(factor)](const Tensor& o, std::span<const Tensor> in) {
                  const auto g = o.grad();
                  auto gx = in[0].mutable_grad();
                  for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * factor[i];
                });
}

Tensor transpose_last2(const Tensor& x) {
  if (x.rank() < 2) shape_error("transpose_last2", x.shape(), "rank < 2");
  const auto m = x.dim(x.rank() - 2);
  const auto n = x.dim(x.rank() - 1);
  const auto batch = x.numel() / (m * n);
  const auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) out[b * m * n + j * m + i] = xv[b * m * n + i * n + j];
    }
  }
  Shape shape = x.shape();
  std::swap(shape[shape.size() - 1], shape[shape.size() - 2]);
  return record("transpose_last2", std::move(shape), std::move(out), {x},
                [m, n, batch](const Tensor& o, std::span<const Tensor> in) {
                  const auto g = o.grad();
                  auto gx = in[0].mutable_grad();
                  for (std::size_t b = 0; b < batch; ++b) {
                    for (std::size_t i = 0; i < m; ++i) {
                      for (std::size_t j = 0; j < n; ++j) gx[b * m * n + i * n + j] += g[b * m * n + j * m + i];
                    }
                  }
                });
}

Tensor swap_axes12(const Tensor& x) {
  if (x.rank() != 4) shape_error("swap_axes12", x.shape(), "rank must be 4");
  const auto a = x.dim(0);
  const auto b = x.dim(1);
  const auto c = x.dim(2);
  const auto d = x.dim(3);
  const auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < a; ++i) {
    for (std::size_t j = 0; j < b; ++j) {
      for (std::size_t k = 0; k < c; ++k) {
        std::copy_n(xv.data() + ((i * b + j) * c + k) * d, d, out.data() + ((i * c + k) * b + j) * d);
      }
    }
  }
  return record("swap_axes12", {a, c, b, d}, std::move(out), {x}, [a, b, c, d](const Tensor& o, std::span<const Tensor> in) {
    const auto g = o.grad();
    auto gx = in[0].mutable_grad();
    for (std::size_t i = 0; i < a; ++i) {
      for (std::size_t j = 0; j < b; ++j) {
        for (std::size_t k = 0; k < c; ++k) {
          const double* src = g.data() + ((i * c + k) * b + j) * d;
          double* dst = gx.data() + ((i * b + j) * c + k) * d;
          for (std::size_t e = 0; e < d; ++e) dst[e] += src[e];
        }
      }
    }
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.numel()) shape_error("reshape", x.shape(), shape);
  std::vector<double> out(x.values().begin(), x.values().end());
  return record("reshape", std::move(shape), std::move(out), {x}, [](const Tensor& o, std::span<const Tensor> in) {
    const auto g = o.grad();
    auto gx = in[0].mutable_grad();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.values()) total += v;
  return record("sum", {1}, {total}, {x}, [](const Tensor& o, std::span<const Tensor> in) {
    const double g = o.grad()[0];
    for (auto& v : in[0].mutable_grad()) v += g;
  });
}

Tensor mean(const Tensor& x) {
  double total = 0.0;
  for (double v : x.values()) total += v;
  const auto n = static_cast<double>(x.numel());
  return record("mean", {1}, {total / n}, {x}, [n](const Tensor& o, std::span<const Tensor> in) {
    const double g = o.grad()[0] / n;
    for (auto& v : in[0].mutable_grad()) v += g;
  });
}

Tensor clamp_min(const Tensor& x, double bound) {
  if (!std::isfinite(bound)) throw std::invalid_argument("clamp_min: bound must be finite");
  const auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] > bound ? xv[i] : bound;
  return record("clamp_min", x.shape(), std::move(out), {x}, [bound](const Tensor& o, std::span<const Tensor> in) {
    const auto g = o.grad();
    const auto xv = in[0].values();
    auto gx = in[0].mutable_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (xv[i] > bound) gx[i] += g[i];
    }
  });
}

namespace {

// Writes the masked softmax of one logit row into `p` and returns
// -log p[target].
double masked_row_softmax(const double* logits, std::size_t width, std::int32_t target,
                          std::span<const std::int32_t> excluded, double* p) {
  std::copy_n(logits, width, p);
  for (auto id : excluded) {
    if (id != target) p[id] = kNegInf;
  }
  double mx = kNegInf;
  for (std::size_t c = 0; c < width; ++c) mx = std::max(mx, p[c]);
  double total = 0.0;
  for (std::size_t c = 0; c < width; ++c) {
    p[c] = p[c] == kNegInf ? 0.0 : std::exp(p[c] - mx);
    total += p[c];
  }
  const double log_total = std::log(total);
  const double nll = -(logits[target] - mx - log_total);
  for (std::size_t c = 0; c < width; ++c) p[c] /= total;
  return nll;
}

}  // namespace

Tensor softmax_cross_entropy(const Tensor& logits, std::span<const std::int32_t> targets,
                             const ExcludedColumns& excluded) {
  if (logits.rank() != 2) shape_error("softmax_cross_entropy", logits.shape(), "logits must be 2-D");
  const auto rows = logits.dim(0);
  const auto width = logits.dim(1);
  if (targets.size() != rows || excluded.offsets.size() != rows + 1) {
    throw std::invalid_argument("softmax_cross_entropy: " + std::to_string(targets.size()) + " targets / " +
                                std::to_string(excluded.offsets.size()) + " offsets for logits " +
                                shape_str(logits.shape()));
  }
  for (auto t : targets) {
    if (t < 0 || static_cast<std::size_t>(t) >= width) {
      throw std::out_of_range("softmax_cross_entropy: target " + std::to_string(t) + " out of range");
    }
  }
  for (auto id : excluded.ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= width) {
      throw std::out_of_range("softmax_cross_entropy: excluded column " + std::to_string(id) + " out of range");
    }
  }
  const bool keep_probs = grad_enabled() && logits.requires_grad();
  std::vector<double> probs(keep_probs ? rows * width : width);
  double total = 0.0;
  const auto lv = logits.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const std::span<const std::int32_t> ex(excluded.ids.data() + excluded.offsets[r],
                                           excluded.offsets[r + 1] - excluded.offsets[r]);
    double* p = probs.data() + (keep_probs ? r * width : 0);
    total += masked_row_softmax(lv.data() + r * width, width, targets[r], ex, p);
  }
  if (!keep_probs) return Tensor::from({1}, {total / static_cast<double>(rows)});
  std::vector<std::int32_t> tgt(targets.begin(), targets.end());
  return record("softmax_cross_entropy", {1}, {total / static_cast<double>(rows)}, {logits},
                [rows, width, tgt = std::move(tgt), probs = std::move(probs)](const Tensor& o,
                                                                              std::span<const Tensor> in) {
                  const double g = o.grad()[0] / static_cast<double>(rows);
                  auto gl = in[0].mutable_grad();
                  for (std::size_t r = 0; r < rows; ++r) {
                    const double* p = probs.data() + r * width;
                    double* dst = gl.data() + r * width;
                    for (std::size_t c = 0; c < width; ++c) dst[c] += g * p[c];
                    dst[static_cast<std::size_t>(tgt[r])] -= g;
                  }
                });
}

}  // namespace grit::diff
