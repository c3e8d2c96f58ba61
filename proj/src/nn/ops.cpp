#include "wstta/nn/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

namespace wstta::nn {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

void require_rank(const Tensor& t, std::size_t rank, const char* what) {
  if (t.rank() != rank) {
    throw DimensionError("rank", std::string(what) + " expects rank " + std::to_string(rank) + ", got " +
                                     shape_to_string(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw DimensionError("shape", std::string(what) + ": " + shape_to_string(a.shape()) + " vs " +
                                      shape_to_string(b.shape()));
  }
}

struct ConvGeometry {
  std::size_t n, c, h, w, f, kh, kw, stride, pad, oh, ow;
};

ConvGeometry conv_geometry(const Tensor& input, const Tensor& weights, const Tensor& bias, std::size_t stride,
                           std::size_t padding) {
  require_rank(input, 4, "conv2d input");
  require_rank(weights, 4, "conv2d weights");
  if (stride == 0) throw UsageError("conv2d stride must be positive");
  ConvGeometry g{};
  g.n = input.dim(0);
  g.c = input.dim(1);
  g.h = input.dim(2);
  g.w = input.dim(3);
  g.f = weights.dim(0);
  g.kh = weights.dim(2);
  g.kw = weights.dim(3);
  g.stride = stride;
  g.pad = padding;
  if (weights.dim(1) != g.c) {
    throw DimensionError("channels", "input has " + std::to_string(g.c) + " channels, weights expect " +
                                         std::to_string(weights.dim(1)));
  }
  if (bias.size() != g.f) {
    throw DimensionError("filters", "bias has " + std::to_string(bias.size()) + " entries for " +
                                        std::to_string(g.f) + " filters");
  }
  if (g.kh % 2 == 0) throw DimensionError("kernel_height", "kernel height must be odd");
  if (g.kw % 2 == 0) throw DimensionError("kernel_width", "kernel width must be odd");
  const std::size_t ph = g.h + 2 * g.pad, pw = g.w + 2 * g.pad;
  if (ph < g.kh || (ph - g.kh) % stride != 0) {
    throw DimensionError("height", "(H + 2*padding - kH) must be a non-negative multiple of stride");
  }
  if (pw < g.kw || (pw - g.kw) % stride != 0) {
    throw DimensionError("width", "(W + 2*padding - kW) must be a non-negative multiple of stride");
  }
  g.oh = (ph - g.kh) / stride + 1;
  g.ow = (pw - g.kw) / stride + 1;
  return g;
}

// cols: [C*kh*kw, oh*ow] for image n
void im2col(const ConvGeometry& g, const double* image, double* cols) {
  const std::size_t plane = g.oh * g.ow;
  for (std::size_t c = 0; c < g.c; ++c) {
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        double* row = cols + ((c * g.kh + ky) * g.kw + kx) * plane;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<long>(g.h) && ix < static_cast<long>(g.w);
            row[oy * g.ow + ox] = inside ? image[(c * g.h + iy) * g.w + ix] : 0.0;
          }
        }
      }
    }
  }
}

void col2im_add(const ConvGeometry& g, const double* cols, double* image) {
  const std::size_t plane = g.oh * g.ow;
  for (std::size_t c = 0; c < g.c; ++c) {
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        const double* row = cols + ((c * g.kh + ky) * g.kw + kx) * plane;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            if (ix < 0 || ix >= static_cast<long>(g.w)) continue;
            image[(c * g.h + iy) * g.w + ix] += row[oy * g.ow + ox];
          }
        }
      }
    }
  }
}

}  // namespace

namespace kernel {

Tensor conv2d(const Tensor& input, const Tensor& weights, const Tensor& bias, std::size_t stride,
              std::size_t padding) {
  const ConvGeometry g = conv_geometry(input, weights, bias, stride, padding);
  Tensor out(Shape{g.n, g.f, g.oh, g.ow});
  const std::size_t k = g.c * g.kh * g.kw, plane = g.oh * g.ow;
  Buffer cols(k * plane);
  ConstMapMat w(weights.data(), g.f, k);
  for (std::size_t n = 0; n < g.n; ++n) {
    im2col(g, input.data() + n * g.c * g.h * g.w, cols.data());
    MapMat o(out.data() + n * g.f * plane, g.f, plane);
    o.noalias() = w * ConstMapMat(cols.data(), k, plane);
    for (std::size_t f = 0; f < g.f; ++f) o.row(f).array() += bias[f];
  }
  return out;
}

Tensor softmax_rows(const Tensor& m) {
  require_rank(m, 2, "softmax_rows");
  Tensor out(m.shape());
  const std::size_t rows = m.dim(0), cols = m.dim(1);
  for (std::size_t r = 0; r < rows; ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < cols; ++c) mx = std::max(mx, m.at(r, c));
    double total = 0.0;
    for (std::size_t c = 0; c < cols; ++c) total += (out.at(r, c) = std::exp(m.at(r, c) - mx));
    for (std::size_t c = 0; c < cols; ++c) out.at(r, c) /= total;
  }
  return out;
}

Tensor softmax_cols(const Tensor& m) {
  require_rank(m, 2, "softmax_cols");
  Tensor out(m.shape());
  const std::size_t rows = m.dim(0), cols = m.dim(1);
  for (std::size_t c = 0; c < cols; ++c) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t r = 0; r < rows; ++r) mx = std::max(mx, m.at(r, c));
    double total = 0.0;
    for (std::size_t r = 0; r < rows; ++r) total += (out.at(r, c) = std::exp(m.at(r, c) - mx));
    for (std::size_t r = 0; r < rows; ++r) out.at(r, c) /= total;
  }
  return out;
}

Tensor sigmoid(const Tensor& x) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = x[i];
    out[i] = v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
  }
  return out;
}

}  // namespace kernel

Var conv2d(Tape& tape, Var input, Var weights, Var bias, std::size_t stride, std::size_t padding) {
  auto forward = [stride, padding](std::span<const Tensor* const> in) {
    return kernel::conv2d(*in[0], *in[1], *in[2], stride, padding);
  };
  auto backward = [stride, padding](std::span<const Tensor* const> in, const Tensor&, const Tensor& gout,
                                    std::span<Tensor* const> gin) {
    const Tensor& x = *in[0];
    const Tensor& w = *in[1];
    const ConvGeometry g = conv_geometry(x, w, *in[2], stride, padding);
    const std::size_t k = g.c * g.kh * g.kw, plane = g.oh * g.ow;
    Buffer cols(k * plane);
    ConstMapMat wm(w.data(), g.f, k);
    for (std::size_t n = 0; n < g.n; ++n) {
      ConstMapMat dy(gout.data() + n * g.f * plane, g.f, plane);
      if (gin[2]) {
        for (std::size_t f = 0; f < g.f; ++f) (*gin[2])[f] += dy.row(f).sum();
      }
      if (gin[1]) {
        im2col(g, x.data() + n * g.c * g.h * g.w, cols.data());
        MapMat dw(gin[1]->data(), g.f, k);
        dw.noalias() += dy * ConstMapMat(cols.data(), k, plane).transpose();
      }
      if (gin[0]) {
        MapMat dcols(cols.data(), k, plane);
        dcols.noalias() = wm.transpose() * dy;
        col2im_add(g, cols.data(), gin[0]->data() + n * g.c * g.h * g.w);
      }
    }
  };
  return tape.record("conv2d", {input, weights, bias}, forward, backward);
}

Var relu(Tape& tape, Var x) {
  auto forward = [](std::span<const Tensor* const> in) {
    Tensor out = *in[0];
    for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
    return out;
  };
  auto backward = [](std::span<const Tensor* const> in, const Tensor&, const Tensor& gout,
                     std::span<Tensor* const> gin) {
    const Tensor& x = *in[0];
    for (std::size_t i = 0; i < x.size(); ++i) {
      if (x[i] > 0.0) (*gin[0])[i] += gout[i];
    }
  };
  return tape.record("relu", {x}, forward, backward);
}

Var maxpool2(Tape& tape, Var x) {
  auto forward = [](std::span<const Tensor* const> in) {
    const Tensor& t = *in[0];
    require_rank(t, 4, "maxpool2");
    const std::size_t n = t.dim(0), c = t.dim(1), oh = t.dim(2) / 2, ow = t.dim(3) / 2;
    Tensor out(Shape{n, c, oh, ow});
    for (std::size_t a = 0; a < n; ++a)
      for (std::size_t b = 0; b < c; ++b)
        for (std::size_t y = 0; y < oh; ++y)
          for (std::size_t z = 0; z < ow; ++z) {
            out.at(a, b, y, z) = std::max(std::max(t.at(a, b, 2 * y, 2 * z), t.at(a, b, 2 * y, 2 * z + 1)),
                                          std::max(t.at(a, b, 2 * y + 1, 2 * z), t.at(a, b, 2 * y + 1, 2 * z + 1)));
          }
    return out;
  };
  auto backward = [](std::span<const Tensor* const> in, const Tensor&, const Tensor& gout,
                     std::span<Tensor* const> gin) {
    const Tensor& t = *in[0];
    Tensor& g = *gin[0];
    const std::size_t n = t.dim(0), c = t.dim(1), oh = t.dim(2) / 2, ow = t.dim(3) / 2;
    for (std::size_t a = 0; a < n; ++a)
      for (std::size_t b = 0; b < c; ++b)
        for (std::size_t y = 0; y < oh; ++y)
          for (std::size_t z = 0; z < ow; ++z) {
            // first maximum in row-major window order takes the gradient
            std::size_t by = 2 * y, bx = 2 * z;
            double best = t.at(a, b, by, bx);
            for (std::size_t dy = 0; dy < 2; ++dy)
              for (std::size_t dx = 0; dx < 2; ++dx) {
                const double v = t.at(a, b, 2 * y + dy, 2 * z + dx);
                if (v > best) {
                  best = v;
                  by = 2 * y + dy;
                  bx = 2 * z + dx;
                }
              }
            g.at(a, b, by, bx) += gout.at(a, b, y, z);
          }
  };
  return tape.record("maxpool2", {x}, forward, backward);
}

Var dense(Tape& tape, Var x, Var weights, Var bias) {
  auto forward = [](std::span<const Tensor* const> in) {
    const Tensor& a = *in[0];
    const Tensor& w = *in[1];
    const Tensor& b = *in[2];
    require_rank(a, 2, "dense input");
    require_rank(w, 2, "dense weights");
    if (a.dim(1) != w.dim(1)) {
      throw DimensionError("features", "input width " + std::to_string(a.dim(1)) + " vs weights " +
                                           std::to_string(w.dim(1)));
    }
    if (b.size() != w.dim(0)) throw DimensionError("outputs", "bias length does not match weight rows");
    Tensor out(Shape{a.dim(0), w.dim(0)});
    MapMat o(out.data(), a.dim(0), w.dim(0));
    o.noalias() = ConstMapMat(a.data(), a.dim(0), a.dim(1)) * ConstMapMat(w.data(), w.dim(0), w.dim(1)).transpose();
    for (std::size_t r = 0; r < a.dim(0); ++r)
      for (std::size_t c = 0; c < w.dim(0); ++c) o(r, c) += b[c];
    return out;
  };
  auto backward = [](std::span<const Tensor* const> in, const Tensor&, const Tensor& gout,
                     std::span<Tensor* const> gin) {
    const Tensor& a = *in[0];
    const Tensor& w = *in[1];
    const std::size_t n = a.dim(0), din = a.dim(1), dout = w.dim(0);
    ConstMapMat dy(gout.data(), n, dout);
    if (gin[0]) MapMat(gin[0]->data(), n, din).noalias() += dy * ConstMapMat(w.data(), dout, din);
    if (gin[1]) MapMat(gin[1]->data(), dout, din).noalias() += dy.transpose() * ConstMapMat(a.data(), n, din);
    if (gin[2]) {
      for (std::size_t c = 0; c < dout; ++c) (*gin[2])[c] += dy.col(c).sum();
    }
  };
  return tape.record("dense", {x, weights, bias}, forward, backward);
}

Var softmax_rows(Tape& tape, Var m) {
  auto forward = [](std::span<const Tensor* const> in) { return kernel::softmax_rows(*in[0]); };
  auto backward = [](std::span<const Tensor* const>, const Tensor& out, const Tensor& gout,
                     std::span<Tensor* const> gin) {
    const std::size_t rows = out.dim(0), cols = out.dim(1);
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < cols; ++c) dot += gout.at(r, c) * out.at(r, c);
      for (std::size_t c = 0; c < cols; ++c) gin[0]->at(r, c) += out.at(r, c) * (gout.at(r, c) - dot);
    }
  };
  return tape.record("softmax_rows", {m}, forward, backward);
}

Var softmax_cols(Tape& tape, Var m) {
  auto forward = [](std::span<const Tensor* const> in) { return kernel::softmax_cols(*in[0]); };
  auto backward = [](std::span<const Tensor* const>, const Tensor& out, const Tensor& gout,
                     std::span<Tensor* const> gin) {
    const std::size_t rows = out.dim(0), cols = out.dim(1);
    for (std::size_t c = 0; c < cols; ++c) {
      double dot = 0.0;
      for (std::size_t r = 0; r < rows; ++r) dot += gout.at(r, c) * out.at(r, c);
      for (std::size_t r = 0; r < rows; ++r) gin[0]->at(r, c) += out.at(r, c) * (gout.at(r, c) - dot);
    }
  };
  return tape.record("softmax_cols", {m}, forward, backward);
}

Var sigmoid(Tape& tape, Var x) {
  auto forward = [](std::span<const Tensor* const> in) { return kernel::sigmoid(*in[0]); };
  auto backward = [](std::span<const Tensor* const>, const Tensor& out, const Tensor& gout,
                     std::span<Tensor* const> gin) {
    for (std::size_t i = 0; i < out.size(); ++i) (*gin[0])[i] += gout[i] * out[i] * (1.0 - out[i]);
  };
  return tape.record("sigmoid", {x}, forward, backward);
}

Var reshape(Tape& tape, Var x, Shape shape) {
  auto forward = [shape](std::span<const Tensor* const> in) { return in[0]->reshaped(shape); };
  auto backward = [](std::span<const Tensor* const>, const Tensor&, const Tensor& gout,
                     std::span<Tensor* const> gin) {
    for (std::size_t i = 0; i < gout.size(); ++i) (*gin[0])[i] += gout[i];
  };
  return tape.record("reshape", {x}, forward, backward);
}

Var gather(Tape& tape, Var x, std::vector<std::size_t> indices, Shape shape) {
  if (element_count(shape) != indices.size()) {
    throw DimensionError("indices", "gather shape " + shape_to_string(shape) + " vs " +
                                        std::to_string(indices.size()) + " indices");
  }
  auto forward = [indices, shape](std::span<const Tensor* const> in) {
    const Tensor& src = *in[0];
    Tensor out(shape);
    for (std::size_t i = 0; i < indices.size(); ++i) {
      if (indices[i] >= src.size()) throw DimensionError("indices", "gather index out of range");
      out[i] = src[indices[i]];
    }
    return out;
  };
  auto backward = [indices](std::span<const Tensor* const>, const Tensor&, const Tensor& gout,
                            std::span<Tensor* const> gin) {
    for (std::size_t i = 0; i < indices.size(); ++i) (*gin[0])[indices[i]] += gout[i];
  };
  return tape.record("gather", {x}, forward, backward);
}

Var slice_cols(Tape& tape, Var m, std::size_t begin, std::size_t end) {
  auto forward = [begin, end](std::span<const Tensor* const> in) {
    const Tensor& t = *in[0];
    require_rank(t, 2, "slice_cols");
    if (begin > end || end > t.dim(1)) throw DimensionError("columns", "slice out of range");
    Tensor out(Shape{t.dim(0), end - begin});
    for (std::size_t r = 0; r < t.dim(0); ++r)
      for (std::size_t c = begin; c < end; ++c) out.at(r, c - begin) = t.at(r, c);
    return out;
  };
  auto backward = [begin, end](std::span<const Tensor* const>, const Tensor&, const Tensor& gout,
                               std::span<Tensor* const> gin) {
    for (std::size_t r = 0; r < gout.dim(0); ++r)
      for (std::size_t c = begin; c < end; ++c) gin[0]->at(r, c) += gout.at(r, c - begin);
  };
  return tape.record("slice_cols", {m}, forward, backward);
}

Var place_in_columns(Tape& tape, Var values, std::vector<std::size_t> columns, std::size_t cols) {
  auto forward = [columns, cols](std::span<const Tensor* const> in) {
    const Tensor& v = *in[0];
    if (v.size() != columns.size()) throw DimensionError("rows", "one column index per value required");
    Tensor out(Shape{v.size(), cols});
    for (std::size_t k = 0; k < v.size(); ++k) {
      if (columns[k] >= cols) throw DimensionError("columns", "column index out of range");
      out.at(k, columns[k]) = v[k];
    }
    return out;
  };
  auto backward = [columns](std::span<const Tensor* const>, const Tensor&, const Tensor& gout,
                            std::span<Tensor* const> gin) {
    for (std::size_t k = 0; k < columns.size(); ++k) (*gin[0])[k] += gout.at(k, columns[k]);
  };
  return tape.record("place_in_columns", {values}, forward, backward);
}

Var mul(Tape& tape, Var a, Var b) {
  auto forward = [](std::span<const Tensor* const> in) {
    require_same_shape(*in[0], *in[1], "mul");
    Tensor out = *in[0];
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= (*in[1])[i];
    return out;
  };
  auto backward = [](std::span<const Tensor* const> in, const Tensor&, const Tensor& gout,
                     std::span<Tensor* const> gin) {
    for (std::size_t i = 0; i < gout.size(); ++i) {
      if (gin[0]) (*gin[0])[i] += gout[i] * (*in[1])[i];
      if (gin[1]) (*gin[1])[i] += gout[i] * (*in[0])[i];
    }
  };
  return tape.record("mul", {a, b}, forward, backward);
}

Var add(Tape& tape, Var a, Var b) {
  auto forward = [](std::span<const Tensor* const> in) {
    require_same_shape(*in[0], *in[1], "add");
    Tensor out = *in[0];
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += (*in[1])[i];
    return out;
  };
  auto backward = [](std::span<const Tensor* const>, const Tensor&, const Tensor& gout,
                     std::span<Tensor* const> gin) {
    for (std::size_t i = 0; i < gout.size(); ++i) {
      if (gin[0]) (*gin[0])[i] += gout[i];
      if (gin[1]) (*gin[1])[i] += gout[i];
    }
  };
  return tape.record("add", {a, b}, forward, backward);
}

Var scale(Tape& tape, Var x, double factor) {
  auto forward = [factor](std::span<const Tensor* const> in) {
    Tensor out = *in[0];
    for (double& v : out.values()) v *= factor;
    return out;
  };
  auto backward = [factor](std::span<const Tensor* const>, const Tensor&, const Tensor& gout,
                           std::span<Tensor* const> gin) {
    for (std::size_t i = 0; i < gout.size(); ++i) (*gin[0])[i] += factor * gout[i];
  };
  return tape.record("scale", {x}, forward, backward);
}

Var sum_rows(Tape& tape, Var m) {
  auto forward = [](std::span<const Tensor* const> in) {
    const Tensor& t = *in[0];
    require_rank(t, 2, "sum_rows");
    Tensor out(Shape{t.dim(1)});
    for (std::size_t r = 0; r < t.dim(0); ++r)
      for (std::size_t c = 0; c < t.dim(1); ++c) out[c] += t.at(r, c);
    return out;
  };
  auto backward = [](std::span<const Tensor* const>, const Tensor&, const Tensor& gout,
                     std::span<Tensor* const> gin) {
    Tensor& g = *gin[0];
    for (std::size_t r = 0; r < g.dim(0); ++r)
      for (std::size_t c = 0; c < g.dim(1); ++c) g.at(r, c) += gout[c];
  };
  return tape.record("sum_rows", {m}, forward, backward);
}

Var sum(Tape& tape, Var x) {
  auto forward = [](std::span<const Tensor* const> in) {
    double total = 0.0;
    for (double v : in[0]->values()) total += v;
    return Tensor::scalar(total);
  };
  auto backward = [](std::span<const Tensor* const>, const Tensor&, const Tensor& gout,
                     std::span<Tensor* const> gin) {
    for (double& v : gin[0]->values()) v += gout[0];
  };
  return tape.record("sum", {x}, forward, backward);
}

Var bce_with_logits(Tape& tape, Var logits, std::vector<double> targets, std::vector<double> weights) {
  auto forward = [targets, weights](std::span<const Tensor* const> in) {
    const Tensor& z = *in[0];
    if (z.size() != targets.size() || z.size() != weights.size()) {
      throw DimensionError("targets", "bce_with_logits needs one target and weight per logit");
    }
    double total = 0.0, norm = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) {
      if (weights[i] <= 0.0) continue;
      const double x = z[i];
      // log(1 + exp(-|x|)) + max(x, 0) - x*t
      total += weights[i] * (std::log1p(std::exp(-std::abs(x))) + std::max(x, 0.0) - x * targets[i]);
      norm += weights[i];
    }
    return Tensor::scalar(norm > 0.0 ? total / norm : 0.0);
  };
  auto backward = [targets, weights](std::span<const Tensor* const> in, const Tensor&, const Tensor& gout,
                                     std::span<Tensor* const> gin) {
    const Tensor& z = *in[0];
    double norm = 0.0;
    for (double w : weights) norm += w > 0.0 ? w : 0.0;
    if (norm <= 0.0) return;
    const Tensor p = kernel::sigmoid(z);
    for (std::size_t i = 0; i < z.size(); ++i) {
      if (weights[i] <= 0.0) continue;
      (*gin[0])[i] += gout[0] * weights[i] * (p[i] - targets[i]) / norm;
    }
  };
  return tape.record("bce_with_logits", {logits}, forward, backward);
}

Var softmax_cross_entropy(Tape& tape, Var logits, std::vector<int> labels) {
  auto forward = [labels](std::span<const Tensor* const> in) {
    const Tensor& z = *in[0];
    require_rank(z, 2, "softmax_cross_entropy");
    if (z.dim(0) != labels.size()) throw DimensionError("rows", "one label per logit row required");
    const Tensor p = kernel::softmax_rows(z);
    double total = 0.0;
    std::size_t count = 0;
    for (std::size_t r = 0; r < labels.size(); ++r) {
      if (labels[r] < 0) continue;
      const auto c = static_cast<std::size_t>(labels[r]);
      if (c >= z.dim(1)) throw DimensionError("classes", "label out of range");
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < z.dim(1); ++j) mx = std::max(mx, z.at(r, j));
      double lse = 0.0;
      for (std::size_t j = 0; j < z.dim(1); ++j) lse += std::exp(z.at(r, j) - mx);
      total += std::log(lse) + mx - z.at(r, c);
      ++count;
    }
    return Tensor::scalar(count ? total / static_cast<double>(count) : 0.0);
  };
  auto backward = [labels](std::span<const Tensor* const> in, const Tensor&, const Tensor& gout,
                           std::span<Tensor* const> gin) {
    const Tensor& z = *in[0];
    std::size_t count = 0;
    for (int l : labels) count += l >= 0;
    if (!count) return;
    const Tensor p = kernel::softmax_rows(z);
    const double s = gout[0] / static_cast<double>(count);
    for (std::size_t r = 0; r < labels.size(); ++r) {
      if (labels[r] < 0) continue;
      for (std::size_t j = 0; j < z.dim(1); ++j) {
        const double onehot = static_cast<int>(j) == labels[r] ? 1.0 : 0.0;
        gin[0]->at(r, j) += s * (p.at(r, j) - onehot);
      }
    }
  };
  return tape.record("softmax_cross_entropy", {logits}, forward, backward);
}

Var binary_cross_entropy(Tape& tape, Var probs, std::vector<double> targets, double clamp) {
  auto forward = [targets, clamp](std::span<const Tensor* const> in) {
    const Tensor& p = *in[0];
    if (p.size() != targets.size()) throw DimensionError("targets", "one target per probability required");
    double total = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double q = std::clamp(p[i], clamp, 1.0 - clamp);
      total -= targets[i] * std::log(q) + (1.0 - targets[i]) * std::log(1.0 - q);
    }
    return Tensor::scalar(p.size() ? total / static_cast<double>(p.size()) : 0.0);
  };
  auto backward = [targets, clamp](std::span<const Tensor* const> in, const Tensor&, const Tensor& gout,
                                   std::span<Tensor* const> gin) {
    const Tensor& p = *in[0];
    const double n = static_cast<double>(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) {
      if (p[i] < clamp || p[i] > 1.0 - clamp) continue;
      const double q = p[i];
      (*gin[0])[i] += gout[0] * (-targets[i] / q + (1.0 - targets[i]) / (1.0 - q)) / n;
    }
  };
  return tape.record("binary_cross_entropy", {probs}, forward, backward);
}

Var smooth_l1(Tape& tape, Var pred, std::vector<double> targets, std::vector<double> weights, double beta,
              double normalizer) {
  auto forward = [targets, weights, beta, normalizer](std::span<const Tensor* const> in) {
    const Tensor& x = *in[0];
    if (x.size() != targets.size() || x.size() != weights.size()) {
      throw DimensionError("targets", "smooth_l1 needs one target and weight per entry");
    }
    double total = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      if (weights[i] == 0.0) continue;
      const double d = std::abs(x[i] - targets[i]);
      total += weights[i] * (d < beta ? 0.5 * d * d / beta : d - 0.5 * beta);
    }
    return Tensor::scalar(normalizer > 0.0 ? total / normalizer : 0.0);
  };
  auto backward = [targets, weights, beta, normalizer](std::span<const Tensor* const> in, const Tensor&,
                                                       const Tensor& gout, std::span<Tensor* const> gin) {
    if (normalizer <= 0.0) return;
    const Tensor& x = *in[0];
    for (std::size_t i = 0; i < x.size(); ++i) {
      if (weights[i] == 0.0) continue;
      const double d = x[i] - targets[i];
      const double g = std::abs(d) < beta ? d / beta : (d > 0 ? 1.0 : -1.0);
      (*gin[0])[i] += gout[0] * weights[i] * g / normalizer;
    }
  };
  return tape.record("smooth_l1", {pred}, forward, backward);
}

}  // namespace wstta::nn
