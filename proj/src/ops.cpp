#include "voxreg/ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace voxreg {

namespace {

long floor_div(long a, long b) {
  long q = a / b;
  long r = a % b;
  return (r != 0 && ((r < 0) != (b < 0))) ? q - 1 : q;
}

long ceil_div(long a, long b) { return -floor_div(-a, b); }

const char* axis_name(int axis) {
  static const char* names[3] = {"D", "H", "W"};
  return names[axis];
}

bool tape_active() { return grad_mode_enabled(); }

template <typename T>
bool any_needs_grad(std::initializer_list<const TensorPtr<T>*> ts) {
  for (const auto* t : ts)
    if (*t && (*t)->needs_grad()) return true;
  return false;
}

template <typename T>
void require_ndim(const TensorPtr<T>& t, std::size_t n, const char* what) {
  if (t->ndim() != n)
    throw ConfigError(std::string(what) + ": expected " + std::to_string(n) + "-d tensor, got " +
                      std::to_string(t->ndim()) + "-d");
}

}  // namespace

std::array<std::size_t, 3> ConvSpec::output_extent(const std::array<std::size_t, 3>& in) const {
  validate();
  std::array<std::size_t, 3> out{};
  for (int a = 0; a < 3; ++a) {
    const long numer = static_cast<long>(in[a]) + 2L * padding[a] - kernel[a];
    const long e = numer < 0 ? -1 : numer / stride[a] + 1;
    if (e < 1)
      throw ConfigError(std::string("conv3d: output extent on axis ") + axis_name(a) + " is " +
                        std::to_string(e) + " for input " + std::to_string(in[a]) + ", kernel " +
                        std::to_string(kernel[a]) + ", stride " + std::to_string(stride[a]) +
                        ", padding " + std::to_string(padding[a]));
    out[a] = static_cast<std::size_t>(e);
  }
  return out;
}

void ConvSpec::validate() const {
  if (in_channels < 1 || out_channels < 1)
    throw ConfigError("conv3d: channel counts must be positive");
  for (int a = 0; a < 3; ++a) {
    if (kernel[a] < 1)
      throw ConfigError(std::string("conv3d: kernel extent on axis ") + axis_name(a) + " must be positive");
    if (stride[a] < 1)
      throw ConfigError(std::string("conv3d: stride on axis ") + axis_name(a) + " must be positive");
    if (padding[a] < 0)
      throw ConfigError(std::string("conv3d: padding on axis ") + axis_name(a) + " must be non-negative");
  }
}

// ---------------------------------------------------------------------------
// conv3d
// ---------------------------------------------------------------------------

namespace {

struct ConvDims {
  std::size_t n, cin, cout;
  std::array<std::size_t, 3> in;   // D, H, W
  std::array<std::size_t, 3> out;  // D', H', W'
};

template <typename T>
ConvDims conv_dims(const TensorPtr<T>& input, const TensorPtr<T>& weight, const TensorPtr<T>& bias,
                   const ConvSpec& spec) {
  require_ndim(input, 5, "conv3d input");
  require_ndim(weight, 5, "conv3d weight");
  require_ndim(bias, 1, "conv3d bias");
  ConvDims d;
  d.n = input->extent(0);
  d.cin = input->extent(1);
  d.in = {input->extent(2), input->extent(3), input->extent(4)};
  if (d.cin != static_cast<std::size_t>(spec.in_channels))
    throw ConfigError("conv3d: input has " + std::to_string(d.cin) + " channels, spec expects " +
                      std::to_string(spec.in_channels));
  if (weight->extent(0) != static_cast<std::size_t>(spec.out_channels) ||
      weight->extent(1) != static_cast<std::size_t>(spec.in_channels))
    throw ConfigError("conv3d: weight shaped [" + std::to_string(weight->extent(0)) + "," +
                      std::to_string(weight->extent(1)) + ",...] does not match spec channels [" +
                      std::to_string(spec.out_channels) + "," + std::to_string(spec.in_channels) + "]");
  for (int a = 0; a < 3; ++a)
    if (weight->extent(2 + a) != static_cast<std::size_t>(spec.kernel[a]))
      throw ConfigError(std::string("conv3d: weight kernel extent on axis ") + axis_name(a) +
                        " is " + std::to_string(weight->extent(2 + a)) + ", spec says " +
                        std::to_string(spec.kernel[a]));
  if (bias->numel() != static_cast<std::size_t>(spec.out_channels))
    throw ConfigError("conv3d: bias length " + std::to_string(bias->numel()) +
                      " does not match out_channels " + std::to_string(spec.out_channels));
  d.cout = static_cast<std::size_t>(spec.out_channels);
  d.out = spec.output_extent(d.in);
  return d;
}

// Valid output range [lo, hi] for one kernel offset on one axis.
void out_range(std::size_t in_extent, std::size_t out_extent, int stride, int pad, int offset,
               long& lo, long& hi) {
  lo = std::max(0L, ceil_div(static_cast<long>(pad) - offset, stride));
  hi = std::min(static_cast<long>(out_extent) - 1,
                floor_div(static_cast<long>(in_extent) - 1 + pad - offset, stride));
}

template <typename T>
void conv3d_forward_kernel(const T* x, const T* w, const T* b, T* y, const ConvDims& d,
                           const ConvSpec& spec) {
  const std::size_t in_s = d.in[0] * d.in[1] * d.in[2];
  const std::size_t out_s = d.out[0] * d.out[1] * d.out[2];
  const std::size_t kvol =
      static_cast<std::size_t>(spec.kernel[0]) * spec.kernel[1] * spec.kernel[2];

  parallel_for(d.n * d.cout, [&](std::size_t begin, std::size_t end) {
    for (std::size_t idx = begin; idx < end; ++idx) {
      const std::size_t n = idx / d.cout;
      const std::size_t co = idx % d.cout;
      T* yp = y + (n * d.cout + co) * out_s;
      const T bias_v = b[co];
      for (std::size_t i = 0; i < out_s; ++i) yp[i] = bias_v;
#ifdef VOXREG_MUTATION_CHECK
      // Deliberate kernel fault for the selfcheck mutation test build.
      yp[0] += T(1e-3);
#endif
      for (std::size_t ci = 0; ci < d.cin; ++ci) {
        const T* xp = x + (n * d.cin + ci) * in_s;
        const T* wp = w + (co * d.cin + ci) * kvol;
        for (int dz = 0; dz < spec.kernel[0]; ++dz) {
          long zlo, zhi;
          out_range(d.in[0], d.out[0], spec.stride[0], spec.padding[0], dz, zlo, zhi);
          for (int dy = 0; dy < spec.kernel[1]; ++dy) {
            long ylo, yhi;
            out_range(d.in[1], d.out[1], spec.stride[1], spec.padding[1], dy, ylo, yhi);
            for (int dx = 0; dx < spec.kernel[2]; ++dx) {
              long xlo, xhi;
              out_range(d.in[2], d.out[2], spec.stride[2], spec.padding[2], dx, xlo, xhi);
              const T wv = wp[(static_cast<std::size_t>(dz) * spec.kernel[1] + dy) * spec.kernel[2] + dx];
              if (wv == T(0)) continue;
              for (long oz = zlo; oz <= zhi; ++oz) {
                const long iz = oz * spec.stride[0] + dz - spec.padding[0];
                for (long oy = ylo; oy <= yhi; ++oy) {
                  const long iy = oy * spec.stride[1] + dy - spec.padding[1];
                  T* yrow = yp + (static_cast<std::size_t>(oz) * d.out[1] + oy) * d.out[2];
                  const T* xrow = xp + (static_cast<std::size_t>(iz) * d.in[1] + iy) * d.in[2];
                  if (spec.stride[2] == 1) {
                    const T* xq = xrow + (xlo + dx - spec.padding[2]);
                    for (long ox = xlo; ox <= xhi; ++ox) yrow[ox] += wv * xq[ox - xlo];
                  } else {
                    for (long ox = xlo; ox <= xhi; ++ox)
                      yrow[ox] += wv * xrow[ox * spec.stride[2] + dx - spec.padding[2]];
                  }
                }
              }
            }
          }
        }
      }
    }
  });
}

template <typename T>
void conv3d_backward_input(const T* gy, const T* w, T* gx, const ConvDims& d, const ConvSpec& spec) {
  const std::size_t in_s = d.in[0] * d.in[1] * d.in[2];
  const std::size_t out_s = d.out[0] * d.out[1] * d.out[2];
  const std::size_t kvol =
      static_cast<std::size_t>(spec.kernel[0]) * spec.kernel[1] * spec.kernel[2];

  parallel_for(d.n * d.cin, [&](std::size_t begin, std::size_t end) {
    for (std::size_t idx = begin; idx < end; ++idx) {
      const std::size_t n = idx / d.cin;
      const std::size_t ci = idx % d.cin;
      T* gxp = gx + (n * d.cin + ci) * in_s;
      for (std::size_t co = 0; co < d.cout; ++co) {
        const T* gyp = gy + (n * d.cout + co) * out_s;
        const T* wp = w + (co * d.cin + ci) * kvol;
        for (int dz = 0; dz < spec.kernel[0]; ++dz) {
          long zlo, zhi;
          out_range(d.in[0], d.out[0], spec.stride[0], spec.padding[0], dz, zlo, zhi);
          for (int dy = 0; dy < spec.kernel[1]; ++dy) {
            long ylo, yhi;
            out_range(d.in[1], d.out[1], spec.stride[1], spec.padding[1], dy, ylo, yhi);
            for (int dx = 0; dx < spec.kernel[2]; ++dx) {
              long xlo, xhi;
              out_range(d.in[2], d.out[2], spec.stride[2], spec.padding[2], dx, xlo, xhi);
              const T wv = wp[(static_cast<std::size_t>(dz) * spec.kernel[1] + dy) * spec.kernel[2] + dx];
              if (wv == T(0)) continue;
              for (long oz = zlo; oz <= zhi; ++oz) {
                const long iz = oz * spec.stride[0] + dz - spec.padding[0];
                for (long oy = ylo; oy <= yhi; ++oy) {
                  const long iy = oy * spec.stride[1] + dy - spec.padding[1];
                  const T* gyrow = gyp + (static_cast<std::size_t>(oz) * d.out[1] + oy) * d.out[2];
                  T* gxrow = gxp + (static_cast<std::size_t>(iz) * d.in[1] + iy) * d.in[2];
                  for (long ox = xlo; ox <= xhi; ++ox)
                    gxrow[ox * spec.stride[2] + dx - spec.padding[2]] += wv * gyrow[ox];
                }
              }
            }
          }
        }
      }
    }
  });
}

template <typename T>
void conv3d_backward_weight(const T* gy, const T* x, T* gw, const ConvDims& d, const ConvSpec& spec) {
  const std::size_t in_s = d.in[0] * d.in[1] * d.in[2];
  const std::size_t out_s = d.out[0] * d.out[1] * d.out[2];
  const std::size_t kvol =
      static_cast<std::size_t>(spec.kernel[0]) * spec.kernel[1] * spec.kernel[2];

  parallel_for(d.cout * d.cin, [&](std::size_t begin, std::size_t end) {
    for (std::size_t idx = begin; idx < end; ++idx) {
      const std::size_t co = idx / d.cin;
      const std::size_t ci = idx % d.cin;
      T* gwp = gw + (co * d.cin + ci) * kvol;
      for (int dz = 0; dz < spec.kernel[0]; ++dz) {
        long zlo, zhi;
        out_range(d.in[0], d.out[0], spec.stride[0], spec.padding[0], dz, zlo, zhi);
        for (int dy = 0; dy < spec.kernel[1]; ++dy) {
          long ylo, yhi;
          out_range(d.in[1], d.out[1], spec.stride[1], spec.padding[1], dy, ylo, yhi);
          for (int dx = 0; dx < spec.kernel[2]; ++dx) {
            long xlo, xhi;
            out_range(d.in[2], d.out[2], spec.stride[2], spec.padding[2], dx, xlo, xhi);
            T acc = T(0);
            for (std::size_t n = 0; n < d.n; ++n) {
              const T* gyp = gy + (n * d.cout + co) * out_s;
              const T* xp = x + (n * d.cin + ci) * in_s;
              for (long oz = zlo; oz <= zhi; ++oz) {
                const long iz = oz * spec.stride[0] + dz - spec.padding[0];
                for (long oy = ylo; oy <= yhi; ++oy) {
                  const long iy = oy * spec.stride[1] + dy - spec.padding[1];
                  const T* gyrow = gyp + (static_cast<std::size_t>(oz) * d.out[1] + oy) * d.out[2];
                  const T* xrow = xp + (static_cast<std::size_t>(iz) * d.in[1] + iy) * d.in[2];
                  for (long ox = xlo; ox <= xhi; ++ox)
                    acc += gyrow[ox] * xrow[ox * spec.stride[2] + dx - spec.padding[2]];
                }
              }
            }
            gwp[(static_cast<std::size_t>(dz) * spec.kernel[1] + dy) * spec.kernel[2] + dx] += acc;
          }
        }
      }
    }
  });
}

}  // namespace

template <typename T>
TensorPtr<T> conv3d(const TensorPtr<T>& input, const TensorPtr<T>& weight, const TensorPtr<T>& bias,
                    const ConvSpec& spec) {
  const ConvDims d = conv_dims(input, weight, bias, spec);
  auto out = Tensor<T>::create({d.n, d.cout, d.out[0], d.out[1], d.out[2]});

  conv3d_forward_kernel(input->data().data(), weight->data().data(), bias->data().data(),
                        out->data().data(), d, spec);

  if (tape_active() && any_needs_grad<T>({&input, &weight, &bias})) {
    out->set_parents({input, weight, bias});
    Tensor<T>* out_raw = out.get();
    out->set_backward([input, weight, bias, out_raw, d, spec] {
      const T* gy = out_raw->grad().data();
      if (input->needs_grad())
        conv3d_backward_input(gy, weight->data().data(), input->grad().data(), d, spec);
      if (weight->needs_grad())
        conv3d_backward_weight(gy, input->data().data(), weight->grad().data(), d, spec);
      if (bias->needs_grad()) {
        const std::size_t out_s = d.out[0] * d.out[1] * d.out[2];
        auto gb = bias->grad();
        for (std::size_t co = 0; co < d.cout; ++co) {
          T acc = T(0);
          for (std::size_t n = 0; n < d.n; ++n) {
            const T* gyp = gy + (n * d.cout + co) * out_s;
            for (std::size_t i = 0; i < out_s; ++i) acc += gyp[i];
          }
          gb[co] += acc;
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// relu
// ---------------------------------------------------------------------------

template <typename T>
TensorPtr<T> relu(const TensorPtr<T>& input) {
  auto out = Tensor<T>::create(input->shape());
  const auto x = input->data();
  auto y = out->data();
  parallel_for(x.size(), [&](std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
  });

  if (tape_active() && input->needs_grad()) {
    out->set_parents({input});
    Tensor<T>* out_raw = out.get();
    out->set_backward([input, out_raw] {
      const auto g = out_raw->grad();
      const auto x = input->data();
      auto gx = input->grad();
      parallel_for(x.size(), [&](std::size_t b, std::size_t e) {
        for (std::size_t i = b; i < e; ++i)
          if (x[i] > T(0)) gx[i] += g[i];
      });
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// batchnorm3d
// ---------------------------------------------------------------------------

namespace {

struct BnDims {
  std::size_t n, c, spatial;
};

template <typename T>
BnDims bn_dims(const TensorPtr<T>& input, const BatchNormState<T>& state) {
  if (input->ndim() != 5 && input->ndim() != 2)
    throw ConfigError("batchnorm3d: expected a 5-d or 2-d input, got " + std::to_string(input->ndim()) +
                      "-d");
  BnDims d;
  d.n = input->extent(0);
  d.c = input->extent(1);
  d.spatial = input->ndim() == 5 ? input->extent(2) * input->extent(3) * input->extent(4) : 1;
  if (d.c != state.channels())
    throw ConfigError("batchnorm3d: input has " + std::to_string(d.c) + " channels, state has " +
                      std::to_string(state.channels()));
  return d;
}

}  // namespace

template <typename T>
TensorPtr<T> batchnorm3d(const TensorPtr<T>& input, BatchNormState<T>& state, bool training) {
  const BnDims d = bn_dims(input, state);
  const std::size_t m = d.n * d.spatial;  // values per channel
  if (training && m < 2)
    throw NumericError(
        "batchnorm3d: degenerate batch statistics, only one value per channel in training mode "
        "(batch " +
        std::to_string(d.n) + ", spatial " + std::to_string(d.spatial) + ")");

  auto out = Tensor<T>::create(input->shape());
  const T* x = input->data().data();
  T* y = out->data().data();
  const T* gamma = state.gamma->data().data();
  const T* beta = state.beta->data().data();
  const T eps = state.epsilon;

  std::vector<T> mean(d.c), invstd(d.c);
  if (training) {
    parallel_for(d.c, [&](std::size_t cb, std::size_t ce) {
      for (std::size_t c = cb; c < ce; ++c) {
        T sum = T(0);
        for (std::size_t n = 0; n < d.n; ++n) {
          const T* xp = x + (n * d.c + c) * d.spatial;
          for (std::size_t s = 0; s < d.spatial; ++s) sum += xp[s];
        }
        const T mu = sum / static_cast<T>(m);
        T var_sum = T(0);
        for (std::size_t n = 0; n < d.n; ++n) {
          const T* xp = x + (n * d.c + c) * d.spatial;
          for (std::size_t s = 0; s < d.spatial; ++s) {
            const T dv = xp[s] - mu;
            var_sum += dv * dv;
          }
        }
        const T var = var_sum / static_cast<T>(m);
        mean[c] = mu;
        invstd[c] = T(1) / std::sqrt(var + eps);
        state.running_mean[c] = (T(1) - state.momentum) * state.running_mean[c] + state.momentum * mu;
        state.running_var[c] = (T(1) - state.momentum) * state.running_var[c] + state.momentum * var;
      }
    });
  } else {
    for (std::size_t c = 0; c < d.c; ++c) {
      mean[c] = state.running_mean[c];
      invstd[c] = T(1) / std::sqrt(state.running_var[c] + eps);
    }
  }

  parallel_for(d.n * d.c, [&](std::size_t b, std::size_t e) {
    for (std::size_t idx = b; idx < e; ++idx) {
      const std::size_t c = idx % d.c;
      const T* xp = x + idx * d.spatial;
      T* yp = y + idx * d.spatial;
      const T mu = mean[c], is = invstd[c], g = gamma[c], bt = beta[c];
      for (std::size_t s = 0; s < d.spatial; ++s) yp[s] = g * (xp[s] - mu) * is + bt;
    }
  });

  if (tape_active() && any_needs_grad<T>({&input, &state.gamma, &state.beta})) {
    auto gamma_t = state.gamma;
    auto beta_t = state.beta;
    out->set_parents({input, gamma_t, beta_t});
    Tensor<T>* out_raw = out.get();
    out->set_backward([input, gamma_t, beta_t, out_raw, d, mean, invstd, m, training] {
      const T* gy = out_raw->grad().data();
      const T* x = input->data().data();
      const T* gamma = gamma_t->data().data();
      const bool need_x = input->needs_grad();
      const bool need_g = gamma_t->needs_grad();
      const bool need_b = beta_t->needs_grad();
      T* gx = need_x ? input->grad().data() : nullptr;
      T* gg = need_g ? gamma_t->grad().data() : nullptr;
      T* gb = need_b ? beta_t->grad().data() : nullptr;

      parallel_for(d.c, [&](std::size_t cb, std::size_t ce) {
        for (std::size_t c = cb; c < ce; ++c) {
          const T mu = mean[c], is = invstd[c];
          T sum_dy = T(0), sum_dy_xhat = T(0);
          for (std::size_t n = 0; n < d.n; ++n) {
            const T* gyp = gy + (n * d.c + c) * d.spatial;
            const T* xp = x + (n * d.c + c) * d.spatial;
            for (std::size_t s = 0; s < d.spatial; ++s) {
              sum_dy += gyp[s];
              sum_dy_xhat += gyp[s] * (xp[s] - mu) * is;
            }
          }
          if (gg) gg[c] += sum_dy_xhat;
          if (gb) gb[c] += sum_dy;
          if (gx) {
            const T g = gamma[c];
            if (training) {
              const T inv_m = T(1) / static_cast<T>(m);
              for (std::size_t n = 0; n < d.n; ++n) {
                const T* gyp = gy + (n * d.c + c) * d.spatial;
                const T* xp = x + (n * d.c + c) * d.spatial;
                T* gxp = gx + (n * d.c + c) * d.spatial;
                for (std::size_t s = 0; s < d.spatial; ++s) {
                  const T xhat = (xp[s] - mu) * is;
                  gxp[s] += g * is * (gyp[s] - inv_m * sum_dy - xhat * inv_m * sum_dy_xhat);
                }
              }
            } else {
              for (std::size_t n = 0; n < d.n; ++n) {
                const T* gyp = gy + (n * d.c + c) * d.spatial;
                T* gxp = gx + (n * d.c + c) * d.spatial;
                for (std::size_t s = 0; s < d.spatial; ++s) gxp[s] += g * is * gyp[s];
              }
            }
          }
        }
      });
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// maxpool3d
// ---------------------------------------------------------------------------

template <typename T>
TensorPtr<T> maxpool3d(const TensorPtr<T>& input, int kernel, int stride) {
  require_ndim(input, 5, "maxpool3d input");
  if (kernel < 1 || stride < 1) throw ConfigError("maxpool3d: kernel and stride must be positive");
  const std::size_t n = input->extent(0), c = input->extent(1);
  const std::array<std::size_t, 3> in{input->extent(2), input->extent(3), input->extent(4)};
  std::array<std::size_t, 3> out_e{};
  for (int a = 0; a < 3; ++a) {
    if (in[a] < static_cast<std::size_t>(kernel))
      throw ConfigError(std::string("maxpool3d: spatial extent on axis ") + axis_name(a) + " is " +
                        std::to_string(in[a]) + ", below kernel " + std::to_string(kernel));
    out_e[a] = (in[a] - kernel) / stride + 1;
  }

  auto out = Tensor<T>::create({n, c, out_e[0], out_e[1], out_e[2]});
  const std::size_t in_s = in[0] * in[1] * in[2];
  const std::size_t out_s = out_e[0] * out_e[1] * out_e[2];
  const T* x = input->data().data();
  T* y = out->data().data();
  // argmax is a flat index into the input, saved for the backward scatter
  auto argmax = std::make_shared<std::vector<std::size_t>>(out->numel());

  parallel_for(n * c, [&](std::size_t b, std::size_t e) {
    for (std::size_t idx = b; idx < e; ++idx) {
      const T* xp = x + idx * in_s;
      T* yp = y + idx * out_s;
      std::size_t* ap = argmax->data() + idx * out_s;
      std::size_t o = 0;
      for (std::size_t oz = 0; oz < out_e[0]; ++oz)
        for (std::size_t oy = 0; oy < out_e[1]; ++oy)
          for (std::size_t ox = 0; ox < out_e[2]; ++ox, ++o) {
            T best{};
            std::size_t best_i = 0;
            bool first = true;
            for (int dz = 0; dz < kernel; ++dz)
              for (int dy = 0; dy < kernel; ++dy)
                for (int dx = 0; dx < kernel; ++dx) {
                  const std::size_t iz = oz * stride + dz;
                  const std::size_t iy = oy * stride + dy;
                  const std::size_t ix = ox * stride + dx;
                  const std::size_t fi = (iz * in[1] + iy) * in[2] + ix;
                  // strict > keeps the first maximum in scan order on ties
                  if (first || xp[fi] > best) {
                    best = xp[fi];
                    best_i = fi;
                    first = false;
                  }
                }
            yp[o] = best;
            ap[o] = idx * in_s + best_i;
          }
    }
  });

  if (tape_active() && input->needs_grad()) {
    out->set_parents({input});
    Tensor<T>* out_raw = out.get();
    out->set_backward([input, out_raw, argmax, n, c, out_s] {
      const auto g = out_raw->grad();
      auto gx = input->grad();
      // scatter stays inside one (n, c) plane, so planes parallelize safely
      parallel_for(n * c, [&](std::size_t b, std::size_t e) {
        for (std::size_t idx = b; idx < e; ++idx)
          for (std::size_t o = idx * out_s; o < (idx + 1) * out_s; ++o)
            gx[(*argmax)[o]] += g[o];
      });
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// dropout3d
// ---------------------------------------------------------------------------

template <typename T>
TensorPtr<T> dropout3d(const TensorPtr<T>& input, double rate, bool training, RngStream& rng) {
  if (rate < 0.0 || rate >= 1.0)
    throw ConfigError("dropout3d: rate must lie in [0, 1), got " + std::to_string(rate));
  if (input->ndim() != 5 && input->ndim() != 2)
    throw ConfigError("dropout3d: expected a 5-d or 2-d input");
  if (!training || rate == 0.0) return input;

  const std::size_t n = input->extent(0), c = input->extent(1);
  const std::size_t spatial = input->ndim() == 5
                                  ? input->extent(2) * input->extent(3) * input->extent(4)
                                  : 1;
  // mask drawn sequentially in (n, c) scan order: a pure function of the stream
  auto keep = std::make_shared<std::vector<unsigned char>>(n * c);
  for (auto& k : *keep) k = rng.uniform() >= rate ? 1 : 0;
  const T scale_v = T(1) / (T(1) - static_cast<T>(rate));

  auto out = Tensor<T>::create(input->shape());
  const T* x = input->data().data();
  T* y = out->data().data();
  parallel_for(n * c, [&](std::size_t b, std::size_t e) {
    for (std::size_t idx = b; idx < e; ++idx) {
      const T* xp = x + idx * spatial;
      T* yp = y + idx * spatial;
      if ((*keep)[idx])
        for (std::size_t s = 0; s < spatial; ++s) yp[s] = xp[s] * scale_v;
      else
        for (std::size_t s = 0; s < spatial; ++s) yp[s] = T(0);
    }
  });

  if (tape_active() && input->needs_grad()) {
    out->set_parents({input});
    Tensor<T>* out_raw = out.get();
    out->set_backward([input, out_raw, keep, spatial, scale_v] {
      const auto g = out_raw->grad();
      auto gx = input->grad();
      parallel_for(keep->size(), [&](std::size_t b, std::size_t e) {
        for (std::size_t idx = b; idx < e; ++idx) {
          if (!(*keep)[idx]) continue;
          for (std::size_t s = idx * spatial; s < (idx + 1) * spatial; ++s) gx[s] += g[s] * scale_v;
        }
      });
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// linear
// ---------------------------------------------------------------------------

template <typename T>
TensorPtr<T> linear(const TensorPtr<T>& input, const TensorPtr<T>& weight, const TensorPtr<T>& bias) {
  require_ndim(input, 2, "linear input");
  require_ndim(weight, 2, "linear weight");
  require_ndim(bias, 1, "linear bias");
  const std::size_t n = input->extent(0), f = input->extent(1);
  const std::size_t o = weight->extent(0);
  if (weight->extent(1) != f)
    throw ConfigError("linear: input feature dim " + std::to_string(f) + " does not match weight dim " +
                      std::to_string(weight->extent(1)));
  if (bias->numel() != o)
    throw ConfigError("linear: bias length " + std::to_string(bias->numel()) +
                      " does not match output dim " + std::to_string(o));

  auto out = Tensor<T>::create({n, o});
  const T* x = input->data().data();
  const T* w = weight->data().data();
  const T* b = bias->data().data();
  T* y = out->data().data();
  parallel_for(n, [&](std::size_t nb, std::size_t ne) {
    for (std::size_t i = nb; i < ne; ++i)
      for (std::size_t j = 0; j < o; ++j) {
        T acc = b[j];
        const T* xp = x + i * f;
        const T* wp = w + j * f;
        for (std::size_t k = 0; k < f; ++k) acc += xp[k] * wp[k];
        y[i * o + j] = acc;
      }
  });

  if (tape_active() && any_needs_grad<T>({&input, &weight, &bias})) {
    out->set_parents({input, weight, bias});
    Tensor<T>* out_raw = out.get();
    out->set_backward([input, weight, bias, out_raw, n, f, o] {
      const T* g = out_raw->grad().data();
      if (input->needs_grad()) {
        T* gx = input->grad().data();
        const T* w = weight->data().data();
        parallel_for(n, [&](std::size_t nb, std::size_t ne) {
          for (std::size_t i = nb; i < ne; ++i)
            for (std::size_t j = 0; j < o; ++j) {
              const T gv = g[i * o + j];
              const T* wp = w + j * f;
              T* gxp = gx + i * f;
              for (std::size_t k = 0; k < f; ++k) gxp[k] += gv * wp[k];
            }
        });
      }
      if (weight->needs_grad()) {
        T* gw = weight->grad().data();
        const T* x = input->data().data();
        parallel_for(o, [&](std::size_t ob, std::size_t oe) {
          for (std::size_t j = ob; j < oe; ++j)
            for (std::size_t i = 0; i < n; ++i) {
              const T gv = g[i * o + j];
              const T* xp = x + i * f;
              T* gwp = gw + j * f;
              for (std::size_t k = 0; k < f; ++k) gwp[k] += gv * xp[k];
            }
        });
      }
      if (bias->needs_grad()) {
        auto gb = bias->grad();
        for (std::size_t j = 0; j < o; ++j) {
          T acc = T(0);
          for (std::size_t i = 0; i < n; ++i) acc += g[i * o + j];
          gb[j] += acc;
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// global_avg_pool
// ---------------------------------------------------------------------------

template <typename T>
TensorPtr<T> global_avg_pool(const TensorPtr<T>& input) {
  require_ndim(input, 5, "global_avg_pool input");
  const std::size_t n = input->extent(0), c = input->extent(1);
  const std::size_t spatial = input->extent(2) * input->extent(3) * input->extent(4);
  auto out = Tensor<T>::create({n, c});
  const T* x = input->data().data();
  T* y = out->data().data();
  parallel_for(n * c, [&](std::size_t b, std::size_t e) {
    for (std::size_t idx = b; idx < e; ++idx) {
      const T* xp = x + idx * spatial;
      T acc = T(0);
      for (std::size_t s = 0; s < spatial; ++s) acc += xp[s];
      y[idx] = acc / static_cast<T>(spatial);
    }
  });

  if (tape_active() && input->needs_grad()) {
    out->set_parents({input});
    Tensor<T>* out_raw = out.get();
    out->set_backward([input, out_raw, spatial] {
      const auto g = out_raw->grad();
      auto gx = input->grad();
      const T inv = T(1) / static_cast<T>(spatial);
      parallel_for(g.size(), [&](std::size_t b, std::size_t e) {
        for (std::size_t idx = b; idx < e; ++idx) {
          const T gv = g[idx] * inv;
          for (std::size_t s = idx * spatial; s < (idx + 1) * spatial; ++s) gx[s] += gv;
        }
      });
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// mse_loss
// ---------------------------------------------------------------------------

template <typename T>
TensorPtr<T> mse_loss(const TensorPtr<T>& pred, const TensorPtr<T>& target) {
  if (pred->numel() != target->numel())
    throw ConfigError("mse_loss: prediction length " + std::to_string(pred->numel()) +
                      " does not match target length " + std::to_string(target->numel()));
  if (pred->numel() == 0) throw ConfigError("mse_loss: empty vectors");
  const std::size_t n = pred->numel();
  const T* p = pred->data().data();
  const T* t = target->data().data();
  T acc = T(0);
  for (std::size_t i = 0; i < n; ++i) {
    const T dv = p[i] - t[i];
    acc += dv * dv;
  }
  auto out = Tensor<T>::scalar(acc / static_cast<T>(n));

  if (tape_active() && any_needs_grad<T>({&pred, &target})) {
    out->set_parents({pred, target});
    Tensor<T>* out_raw = out.get();
    out->set_backward([pred, target, out_raw, n] {
      const T g = out_raw->grad()[0];
      const T* p = pred->data().data();
      const T* t = target->data().data();
      const T k = g * T(2) / static_cast<T>(n);
      if (pred->needs_grad()) {
        auto gp = pred->grad();
        for (std::size_t i = 0; i < n; ++i) gp[i] += k * (p[i] - t[i]);
      }
      if (target->needs_grad()) {
        auto gt = target->grad();
        for (std::size_t i = 0; i < n; ++i) gt[i] -= k * (p[i] - t[i]);
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// elementwise / layout plumbing
// ---------------------------------------------------------------------------

template <typename T>
TensorPtr<T> add(const TensorPtr<T>& a, const TensorPtr<T>& b) {
  return add_scaled(a, b, T(1), T(1));
}

template <typename T>
TensorPtr<T> scale(const TensorPtr<T>& input, T factor) {
  auto out = Tensor<T>::create(input->shape());
  const auto x = input->data();
  auto y = out->data();
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = factor * x[i];
  if (tape_active() && input->needs_grad()) {
    out->set_parents({input});
    Tensor<T>* out_raw = out.get();
    out->set_backward([input, out_raw, factor] {
      const auto g = out_raw->grad();
      auto gx = input->grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += factor * g[i];
    });
  }
  return out;
}

template <typename T>
TensorPtr<T> add_scaled(const TensorPtr<T>& a, const TensorPtr<T>& b, T wa, T wb) {
  if (a->shape() != b->shape()) throw ConfigError("add_scaled: shape mismatch");
  auto out = Tensor<T>::create(a->shape());
  const auto xa = a->data();
  const auto xb = b->data();
  auto y = out->data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = wa * xa[i] + wb * xb[i];
  if (tape_active() && any_needs_grad<T>({&a, &b})) {
    out->set_parents({a, b});
    Tensor<T>* out_raw = out.get();
    out->set_backward([a, b, out_raw, wa, wb] {
      const auto g = out_raw->grad();
      if (a->needs_grad()) {
        auto ga = a->grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += wa * g[i];
      }
      if (b->needs_grad()) {
        auto gb = b->grad();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += wb * g[i];
      }
    });
  }
  return out;
}

template <typename T>
TensorPtr<T> concat_cols(const TensorPtr<T>& a, const TensorPtr<T>& b) {
  require_ndim(a, 2, "concat_cols lhs");
  require_ndim(b, 2, "concat_cols rhs");
  if (a->extent(0) != b->extent(0))
    throw ConfigError("concat_cols: row counts differ, " + std::to_string(a->extent(0)) + " vs " +
                      std::to_string(b->extent(0)));
  const std::size_t n = a->extent(0), fa = a->extent(1), fb = b->extent(1);
  auto out = Tensor<T>::create({n, fa + fb});
  const auto xa = a->data();
  const auto xb = b->data();
  auto y = out->data();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < fa; ++j) y[i * (fa + fb) + j] = xa[i * fa + j];
    for (std::size_t j = 0; j < fb; ++j) y[i * (fa + fb) + fa + j] = xb[i * fb + j];
  }
  if (tape_active() && any_needs_grad<T>({&a, &b})) {
    out->set_parents({a, b});
    Tensor<T>* out_raw = out.get();
    out->set_backward([a, b, out_raw, n, fa, fb] {
      const auto g = out_raw->grad();
      if (a->needs_grad()) {
        auto ga = a->grad();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < fa; ++j) ga[i * fa + j] += g[i * (fa + fb) + j];
      }
      if (b->needs_grad()) {
        auto gb = b->grad();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < fb; ++j) gb[i * fb + j] += g[i * (fa + fb) + fa + j];
      }
    });
  }
  return out;
}

template <typename T>
TensorPtr<T> reshape(const TensorPtr<T>& input, std::vector<std::size_t> shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  if (n != input->numel())
    throw ConfigError("reshape: new shape holds " + std::to_string(n) + " values, tensor holds " +
                      std::to_string(input->numel()));
  auto out = Tensor<T>::from_data(std::move(shape),
                                  std::vector<T>(input->data().begin(), input->data().end()));
  if (tape_active() && input->needs_grad()) {
    out->set_parents({input});
    Tensor<T>* out_raw = out.get();
    out->set_backward([input, out_raw] { input->accumulate_grad(out_raw->grad()); });
  }
  return out;
}

#define VOXREG_INSTANTIATE_OPS(T)                                                                     \
  template TensorPtr<T> conv3d<T>(const TensorPtr<T>&, const TensorPtr<T>&, const TensorPtr<T>&,      \
                                   const ConvSpec&);                                                  \
  template TensorPtr<T> relu<T>(const TensorPtr<T>&);                                                 \
  template TensorPtr<T> batchnorm3d<T>(const TensorPtr<T>&, BatchNormState<T>&, bool);                \
  template TensorPtr<T> maxpool3d<T>(const TensorPtr<T>&, int, int);                                  \
  template TensorPtr<T> dropout3d<T>(const TensorPtr<T>&, double, bool, RngStream&);                  \
  template TensorPtr<T> linear<T>(const TensorPtr<T>&, const TensorPtr<T>&, const TensorPtr<T>&);     \
  template TensorPtr<T> global_avg_pool<T>(const TensorPtr<T>&);                                      \
  template TensorPtr<T> mse_loss<T>(const TensorPtr<T>&, const TensorPtr<T>&);                        \
  template TensorPtr<T> add<T>(const TensorPtr<T>&, const TensorPtr<T>&);                             \
  template TensorPtr<T> scale<T>(const TensorPtr<T>&, T);                                             \
  template TensorPtr<T> add_scaled<T>(const TensorPtr<T>&, const TensorPtr<T>&, T, T);                \
  template TensorPtr<T> concat_cols<T>(const TensorPtr<T>&, const TensorPtr<T>&);                     \
  template TensorPtr<T> reshape<T>(const TensorPtr<T>&, std::vector<std::size_t>);

VOXREG_INSTANTIATE_OPS(float)
VOXREG_INSTANTIATE_OPS(double)
#undef VOXREG_INSTANTIATE_OPS

}  // namespace voxreg
