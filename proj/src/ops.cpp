#include "stmn/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstring>

namespace stmn {

namespace {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ConstMap = Eigen::Map<const RowMatrix<T>>;
template <typename T>
using MutMap = Eigen::Map<RowMatrix<T>>;

template <typename T, typename F>
Tensor<T> map_unary(const Tensor<T>& x, F f) {
  Tensor<T> y(x.dims());
  const T* in = x.raw();
  T* out = y.raw();
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(in[i]);
  return y;
}

template <typename T, typename F>
Tensor<T> map_binary(const Tensor<T>& x, const Tensor<T>& y, const char* what, F f) {
  require_same_shape(x, y, what);
  Tensor<T> z(x.dims());
  const T* a = x.raw();
  const T* b = y.raw();
  T* out = z.raw();
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(a[i], b[i]);
  return z;
}

template <typename T>
void check_conv_input(const Tensor<T>& x, const ConvParams<T>& p, const char* what) {
  require_rank(x, 3, what);
  if (x.channels() != p.in_channels()) {
    throw ShapeError(std::string(what) + ": input has " + std::to_string(x.channels()) +
                     " channels, kernel expects " + std::to_string(p.in_channels()));
  }
}

}  // namespace

template <typename T>
ConvParams<T>::ConvParams(Tensor<T> k) : kernel(std::move(k)) {
  require_rank(kernel, 4, "ConvParams");
  if (kernel.dim(0) % 2 == 0 || kernel.dim(1) % 2 == 0) {
    throw ShapeError("ConvParams: kernel spatial size must be odd, got " +
                     shape_string(kernel.dims()));
  }
}

template <typename T>
ConvParams<T> ConvParams<T>::zeros(std::size_t kh, std::size_t kw, std::size_t cin,
                                   std::size_t cout) {
  return ConvParams<T>(Tensor<T>({kh, kw, cin, cout}));
}

template <typename T>
Patches<T> im2col(const Tensor<T>& x, std::size_t kh, std::size_t kw) {
  require_rank(x, 3, "im2col");
  Patches<T> p;
  p.height = x.height();
  p.width = x.width();
  p.kh = kh;
  p.kw = kw;
  p.channels = x.channels();
  const std::size_t c = p.channels;
  if (kh == 1 && kw == 1) {
    p.data.assign(x.raw(), x.raw() + x.size());
    return p;
  }
  p.data.assign(p.rows() * p.cols(), T{0});
  const auto ph = static_cast<std::ptrdiff_t>((kh - 1) / 2);
  const auto pw = static_cast<std::ptrdiff_t>((kw - 1) / 2);
  const auto H = static_cast<std::ptrdiff_t>(p.height);
  const auto W = static_cast<std::ptrdiff_t>(p.width);
  T* row = p.data.data();
  for (std::ptrdiff_t h = 0; h < H; ++h) {
    for (std::ptrdiff_t w = 0; w < W; ++w, row += p.cols()) {
      for (std::size_t i = 0; i < kh; ++i) {
        const std::ptrdiff_t sh = h + static_cast<std::ptrdiff_t>(i) - ph;
        if (sh < 0 || sh >= H) continue;
        for (std::size_t j = 0; j < kw; ++j) {
          const std::ptrdiff_t sw = w + static_cast<std::ptrdiff_t>(j) - pw;
          if (sw < 0 || sw >= W) continue;
          const T* src = x.raw() + (static_cast<std::size_t>(sh) * p.width +
                                    static_cast<std::size_t>(sw)) * c;
          std::memcpy(row + (i * kw + j) * c, src, c * sizeof(T));
        }
      }
    }
  }
  return p;
}

template <typename T>
Tensor<T> conv2d_patches(const Patches<T>& patches, const ConvParams<T>& p) {
  if (patches.kh != p.kh() || patches.kw != p.kw() || patches.channels != p.in_channels()) {
    throw ShapeError("conv2d: patches do not match kernel " + shape_string(p.kernel.dims()));
  }
  Tensor<T> y({patches.height, patches.width, p.out_channels()});
  ConstMap<T> cols(patches.data.data(), static_cast<Eigen::Index>(patches.rows()),
                   static_cast<Eigen::Index>(patches.cols()));
  ConstMap<T> k(p.kernel.raw(), static_cast<Eigen::Index>(patches.cols()),
                static_cast<Eigen::Index>(p.out_channels()));
  MutMap<T> out(y.raw(), static_cast<Eigen::Index>(patches.rows()),
                static_cast<Eigen::Index>(p.out_channels()));
  out.noalias() = cols * k;
  return y;
}

template <typename T>
void accumulate_kernel_grad(const Patches<T>& patches, const Tensor<T>& grad_y,
                            Tensor<T>& grad_kernel) {
  const std::size_t cout = grad_kernel.dim(3);
  if (grad_y.size() != patches.rows() * cout ||
      grad_kernel.size() != patches.cols() * cout) {
    throw ShapeError("conv2d_backward: gradient does not match forward shapes");
  }
  ConstMap<T> cols(patches.data.data(), static_cast<Eigen::Index>(patches.rows()),
                   static_cast<Eigen::Index>(patches.cols()));
  ConstMap<T> gy(grad_y.raw(), static_cast<Eigen::Index>(patches.rows()),
                 static_cast<Eigen::Index>(cout));
  MutMap<T> gk(grad_kernel.raw(), static_cast<Eigen::Index>(patches.cols()),
               static_cast<Eigen::Index>(cout));
  gk.noalias() += cols.transpose() * gy;
}

template <typename T>
void accumulate_patch_grad(const Tensor<T>& grad_y, const ConvParams<T>& p,
                           std::vector<T>& grad_patches) {
  const std::size_t cols_n = p.kh() * p.kw() * p.in_channels();
  const std::size_t rows = grad_y.size() / p.out_channels();
  if (grad_y.size() % p.out_channels() != 0 || grad_patches.size() != rows * cols_n) {
    throw ShapeError("conv2d_backward: gradient does not match kernel " +
                     shape_string(p.kernel.dims()));
  }
  ConstMap<T> gy(grad_y.raw(), static_cast<Eigen::Index>(rows),
                 static_cast<Eigen::Index>(p.out_channels()));
  ConstMap<T> k(p.kernel.raw(), static_cast<Eigen::Index>(cols_n),
                static_cast<Eigen::Index>(p.out_channels()));
  MutMap<T> gp(grad_patches.data(), static_cast<Eigen::Index>(rows),
               static_cast<Eigen::Index>(cols_n));
  gp.noalias() += gy * k.transpose();
}

template <typename T>
Tensor<T> col2im(const std::vector<T>& grad_patches, std::size_t height, std::size_t width,
                 std::size_t kh, std::size_t kw, std::size_t channels) {
  if (grad_patches.size() != height * width * kh * kw * channels) {
    throw ShapeError("col2im: patch gradient has wrong length");
  }
  if (kh == 1 && kw == 1) {
    return Tensor<T>({height, width, channels}, grad_patches);
  }
  Tensor<T> gx({height, width, channels});
  const auto ph = static_cast<std::ptrdiff_t>((kh - 1) / 2);
  const auto pw = static_cast<std::ptrdiff_t>((kw - 1) / 2);
  const auto H = static_cast<std::ptrdiff_t>(height);
  const auto W = static_cast<std::ptrdiff_t>(width);
  const std::size_t ncols = kh * kw * channels;
  const T* row = grad_patches.data();
  for (std::ptrdiff_t h = 0; h < H; ++h) {
    for (std::ptrdiff_t w = 0; w < W; ++w, row += ncols) {
      for (std::size_t i = 0; i < kh; ++i) {
        const std::ptrdiff_t sh = h + static_cast<std::ptrdiff_t>(i) - ph;
        if (sh < 0 || sh >= H) continue;
        for (std::size_t j = 0; j < kw; ++j) {
          const std::ptrdiff_t sw = w + static_cast<std::ptrdiff_t>(j) - pw;
          if (sw < 0 || sw >= W) continue;
          T* dst = gx.raw() + (static_cast<std::size_t>(sh) * width +
                               static_cast<std::size_t>(sw)) * channels;
          const T* src = row + (i * kw + j) * channels;
          for (std::size_t c = 0; c < channels; ++c) dst[c] += src[c];
        }
      }
    }
  }
  return gx;
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const ConvParams<T>& p) {
  check_conv_input(x, p, "conv2d");
  return conv2d_patches(im2col(x, p.kh(), p.kw()), p);
}

template <typename T>
ConvGrads<T> conv2d_backward(const Tensor<T>& x, const ConvParams<T>& p,
                             const Tensor<T>& grad_y) {
  check_conv_input(x, p, "conv2d_backward");
  const Shape expected{x.height(), x.width(), p.out_channels()};
  if (grad_y.dims() != expected) {
    throw ShapeError("conv2d_backward: grad_y " + shape_string(grad_y.dims()) + ", expected " +
                     shape_string(expected));
  }
  const Patches<T> patches = im2col(x, p.kh(), p.kw());
  ConvGrads<T> g;
  g.grad_kernel = Tensor<T>(p.kernel.dims());
  accumulate_kernel_grad(patches, grad_y, g.grad_kernel);
  std::vector<T> gp(patches.rows() * patches.cols(), T{0});
  accumulate_patch_grad(grad_y, p, gp);
  g.grad_x = col2im(gp, x.height(), x.width(), p.kh(), p.kw(), x.channels());
  return g;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return map_unary(x, [](T v) { return v > T{0} ? v : T{0}; });
}

template <typename T>
Tensor<T> relu_backward(const Tensor<T>& x, const Tensor<T>& grad_y) {
  return map_binary(x, grad_y, "relu_backward", [](T v, T g) { return v > T{0} ? g : T{0}; });
}

template <typename T>
Tensor<T> add(const Tensor<T>& x, const Tensor<T>& y) {
  return map_binary(x, y, "add", [](T a, T b) { return a + b; });
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> add_backward(const Tensor<T>& grad_y) {
  return {grad_y, grad_y};
}

template <typename T>
Tensor<T> mul(const Tensor<T>& x, const Tensor<T>& y) {
  return map_binary(x, y, "mul", [](T a, T b) { return a * b; });
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> mul_backward(const Tensor<T>& x, const Tensor<T>& y,
                                             const Tensor<T>& grad_y) {
  require_same_shape(x, grad_y, "mul_backward");
  return {mul(grad_y, y), mul(grad_y, x)};
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T c) {
  return map_unary(x, [c](T v) { return c * v; });
}

template <typename T>
Tensor<T> scale_backward(const Tensor<T>& grad_y, T c) {
  return scale(grad_y, c);
}

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& x, const Tensor<T>& y) {
  require_rank(x, 3, "concat_channels");
  require_rank(y, 3, "concat_channels");
  if (x.height() != y.height() || x.width() != y.width()) {
    throw ShapeError("concat_channels: spatial mismatch " + shape_string(x.dims()) + " vs " +
                     shape_string(y.dims()));
  }
  const std::size_t cx = x.channels();
  const std::size_t cy = y.channels();
  Tensor<T> out({x.height(), x.width(), cx + cy});
  const std::size_t n = x.height() * x.width();
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(x.raw() + i * cx, cx, out.raw() + i * (cx + cy));
    std::copy_n(y.raw() + i * cy, cy, out.raw() + i * (cx + cy) + cx);
  }
  return out;
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> concat_channels_backward(const Tensor<T>& grad_y,
                                                         std::size_t x_channels) {
  require_rank(grad_y, 3, "concat_channels_backward");
  const std::size_t c = grad_y.channels();
  if (x_channels == 0 || x_channels >= c) {
    throw ShapeError("concat_channels_backward: split point out of range");
  }
  const std::size_t cy = c - x_channels;
  Tensor<T> gx({grad_y.height(), grad_y.width(), x_channels});
  Tensor<T> gy({grad_y.height(), grad_y.width(), cy});
  const std::size_t n = grad_y.height() * grad_y.width();
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(grad_y.raw() + i * c, x_channels, gx.raw() + i * x_channels);
    std::copy_n(grad_y.raw() + i * c + x_channels, cy, gy.raw() + i * cy);
  }
  return {std::move(gx), std::move(gy)};
}

template <typename T>
Tensor<T> blend(const Tensor<T>& prev, const Tensor<T>& cand, const Tensor<T>& z) {
  require_same_shape(prev, cand, "blend");
  require_same_shape(prev, z, "blend");
  Tensor<T> out(prev.dims());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = (T{1} - z[i]) * prev[i] + z[i] * cand[i];
  }
  return out;
}

template <typename T>
BlendGrads<T> blend_backward(const Tensor<T>& prev, const Tensor<T>& cand, const Tensor<T>& z,
                             const Tensor<T>& grad_y) {
  require_same_shape(prev, grad_y, "blend_backward");
  require_same_shape(prev, cand, "blend_backward");
  require_same_shape(prev, z, "blend_backward");
  BlendGrads<T> g{Tensor<T>(prev.dims()), Tensor<T>(prev.dims()), Tensor<T>(prev.dims())};
  for (std::size_t i = 0; i < prev.size(); ++i) {
    g.grad_prev[i] = grad_y[i] * (T{1} - z[i]);
    g.grad_cand[i] = grad_y[i] * z[i];
    g.grad_z[i] = grad_y[i] * (cand[i] - prev[i]);
  }
  return g;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return map_unary(x, [](T v) { return T{1} / (T{1} + std::exp(-v)); });
}

template <typename T>
Tensor<T> sigmoid_backward(const Tensor<T>& y, const Tensor<T>& grad_y) {
  return map_binary(y, grad_y, "sigmoid_backward",
                    [](T s, T g) { return g * s * (T{1} - s); });
}

template <typename T>
Tensor<T> tanh(const Tensor<T>& x) {
  return map_unary(x, [](T v) { return std::tanh(v); });
}

template <typename T>
Tensor<T> tanh_backward(const Tensor<T>& y, const Tensor<T>& grad_y) {
  return map_binary(y, grad_y, "tanh_backward", [](T t, T g) { return g * (T{1} - t * t); });
}

template <typename T>
Tensor<T> avg_pool2(const Tensor<T>& x) {
  require_rank(x, 3, "avg_pool2");
  if (x.height() % 2 != 0 || x.width() % 2 != 0) {
    throw ShapeError("avg_pool2: spatial dims must be even, got " + shape_string(x.dims()));
  }
  const std::size_t oh = x.height() / 2;
  const std::size_t ow = x.width() / 2;
  const std::size_t c = x.channels();
  Tensor<T> y({oh, ow, c});
  for (std::size_t h = 0; h < oh; ++h) {
    for (std::size_t w = 0; w < ow; ++w) {
      for (std::size_t k = 0; k < c; ++k) {
        y.at(h, w, k) = T{0.25} * (x.at(2 * h, 2 * w, k) + x.at(2 * h, 2 * w + 1, k) +
                                   x.at(2 * h + 1, 2 * w, k) + x.at(2 * h + 1, 2 * w + 1, k));
      }
    }
  }
  return y;
}

template <typename T>
Tensor<T> avg_pool2_backward(const Tensor<T>& grad_y) {
  require_rank(grad_y, 3, "avg_pool2_backward");
  Tensor<T> gx({grad_y.height() * 2, grad_y.width() * 2, grad_y.channels()});
  for (std::size_t h = 0; h < gx.height(); ++h) {
    for (std::size_t w = 0; w < gx.width(); ++w) {
      for (std::size_t k = 0; k < gx.channels(); ++k) {
        gx.at(h, w, k) = T{0.25} * grad_y.at(h / 2, w / 2, k);
      }
    }
  }
  return gx;
}

template <typename T>
Tensor<T> l2_norm_channels(const Tensor<T>& x) {
  require_rank(x, 3, "l2_norm_channels");
  Tensor<T> s({x.height(), x.width()});
  const std::size_t c = x.channels();
  for (std::size_t i = 0; i < x.height() * x.width(); ++i) {
    T acc{0};
    for (std::size_t k = 0; k < c; ++k) acc += x[i * c + k] * x[i * c + k];
    s[i] = std::sqrt(acc);
  }
  return s;
}

template <typename T>
T sum(const Tensor<T>& x) {
  T acc{0};
  for (T v : x.values()) acc += v;
  return acc;
}

template <typename T>
T sum_of_squares(const Tensor<T>& x) {
  T acc{0};
  for (T v : x.values()) acc += v * v;
  return acc;
}

template <typename T>
void accumulate(Tensor<T>& dst, const Tensor<T>& src) {
  require_same_shape(dst, src, "accumulate");
  T* d = dst.raw();
  const T* s = src.raw();
  for (std::size_t i = 0; i < dst.size(); ++i) d[i] += s[i];
}

#define STMN_INSTANTIATE_OPS(T)                                                               \
  template struct ConvParams<T>;                                                              \
  template Patches<T> im2col(const Tensor<T>&, std::size_t, std::size_t);                     \
  template Tensor<T> conv2d_patches(const Patches<T>&, const ConvParams<T>&);                 \
  template void accumulate_kernel_grad(const Patches<T>&, const Tensor<T>&, Tensor<T>&);      \
  template void accumulate_patch_grad(const Tensor<T>&, const ConvParams<T>&,                 \
                                      std::vector<T>&);                                       \
  template Tensor<T> col2im(const std::vector<T>&, std::size_t, std::size_t, std::size_t,     \
                            std::size_t, std::size_t);                                        \
  template Tensor<T> conv2d(const Tensor<T>&, const ConvParams<T>&);                          \
  template ConvGrads<T> conv2d_backward(const Tensor<T>&, const ConvParams<T>&,               \
                                        const Tensor<T>&);                                    \
  template Tensor<T> relu(const Tensor<T>&);                                                  \
  template Tensor<T> relu_backward(const Tensor<T>&, const Tensor<T>&);                       \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                 \
  template std::pair<Tensor<T>, Tensor<T>> add_backward(const Tensor<T>&);                    \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                 \
  template std::pair<Tensor<T>, Tensor<T>> mul_backward(const Tensor<T>&, const Tensor<T>&,   \
                                                        const Tensor<T>&);                    \
  template Tensor<T> scale(const Tensor<T>&, T);                                              \
  template Tensor<T> scale_backward(const Tensor<T>&, T);                                     \
  template Tensor<T> concat_channels(const Tensor<T>&, const Tensor<T>&);                     \
  template std::pair<Tensor<T>, Tensor<T>> concat_channels_backward(const Tensor<T>&,         \
                                                                    std::size_t);             \
  template Tensor<T> blend(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);             \
  template BlendGrads<T> blend_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, \
                                        const Tensor<T>&);                                    \
  template Tensor<T> sigmoid(const Tensor<T>&);                                               \
  template Tensor<T> sigmoid_backward(const Tensor<T>&, const Tensor<T>&);                    \
  template Tensor<T> tanh(const Tensor<T>&);                                                  \
  template Tensor<T> tanh_backward(const Tensor<T>&, const Tensor<T>&);                       \
  template Tensor<T> avg_pool2(const Tensor<T>&);                                             \
  template Tensor<T> avg_pool2_backward(const Tensor<T>&);                                    \
  template Tensor<T> l2_norm_channels(const Tensor<T>&);                                      \
  template T sum(const Tensor<T>&);                                                           \
  template T sum_of_squares(const Tensor<T>&);                                                \
  template void accumulate(Tensor<T>&, const Tensor<T>&);

STMN_INSTANTIATE_OPS(float)
STMN_INSTANTIATE_OPS(double)

#undef STMN_INSTANTIATE_OPS

}  // namespace stmn
