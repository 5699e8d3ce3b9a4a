#pragma once

// Brute-force reference implementations used only for verification (selfcheck
// and tests). Everything here is written as plain nested loops over index
// tuples, sharing no code with the production kernels, so an error in one
// side cannot hide in the other.

#include <array>
#include <cstddef>
#include <vector>

namespace voxreg::oracle {

struct ConvCase {
  std::size_t n, cin, cout;
  std::array<std::size_t, 3> in;      // D, H, W
  std::array<int, 3> kernel;
  std::array<int, 3> stride;
  std::array<int, 3> padding;

  std::array<std::size_t, 3> out() const {
    std::array<std::size_t, 3> o{};
    for (int a = 0; a < 3; ++a)
      o[a] = static_cast<std::size_t>(
          (static_cast<long>(in[a]) + 2L * padding[a] - kernel[a]) / stride[a] + 1);
    return o;
  }
};

inline std::vector<double> conv3d_reference(const std::vector<double>& x, const std::vector<double>& w,
                                            const std::vector<double>& b, const ConvCase& c) {
  const auto out = c.out();
  std::vector<double> y(c.n * c.cout * out[0] * out[1] * out[2], 0.0);
  for (std::size_t n = 0; n < c.n; ++n)
    for (std::size_t co = 0; co < c.cout; ++co)
      for (std::size_t oz = 0; oz < out[0]; ++oz)
        for (std::size_t oy = 0; oy < out[1]; ++oy)
          for (std::size_t ox = 0; ox < out[2]; ++ox) {
            double acc = b[co];
            for (std::size_t ci = 0; ci < c.cin; ++ci)
              for (int dz = 0; dz < c.kernel[0]; ++dz)
                for (int dy = 0; dy < c.kernel[1]; ++dy)
                  for (int dx = 0; dx < c.kernel[2]; ++dx) {
                    const long iz = static_cast<long>(oz) * c.stride[0] + dz - c.padding[0];
                    const long iy = static_cast<long>(oy) * c.stride[1] + dy - c.padding[1];
                    const long ix = static_cast<long>(ox) * c.stride[2] + dx - c.padding[2];
                    if (iz < 0 || iy < 0 || ix < 0 || iz >= static_cast<long>(c.in[0]) ||
                        iy >= static_cast<long>(c.in[1]) || ix >= static_cast<long>(c.in[2]))
                      continue;  // zero padding
                    const double xv =
                        x[((n * c.cin + ci) * c.in[0] + iz) * c.in[1] * c.in[2] + iy * c.in[2] + ix];
                    const double wv =
                        w[(((co * c.cin + ci) * c.kernel[0] + dz) * c.kernel[1] + dy) * c.kernel[2] + dx];
                    acc += xv * wv;
                  }
            y[(((n * c.cout + co) * out[0] + oz) * out[1] + oy) * out[2] + ox] = acc;
          }
  return y;
}

inline std::vector<double> maxpool3d_reference(const std::vector<double>& x, std::size_t n,
                                               std::size_t c, std::array<std::size_t, 3> in,
                                               int kernel, int stride,
                                               std::array<std::size_t, 3>& out_extents) {
  for (int a = 0; a < 3; ++a) out_extents[a] = (in[a] - kernel) / stride + 1;
  const auto& o = out_extents;
  std::vector<double> y(n * c * o[0] * o[1] * o[2]);
  for (std::size_t ni = 0; ni < n; ++ni)
    for (std::size_t ci = 0; ci < c; ++ci)
      for (std::size_t oz = 0; oz < o[0]; ++oz)
        for (std::size_t oy = 0; oy < o[1]; ++oy)
          for (std::size_t ox = 0; ox < o[2]; ++ox) {
            double best = -1e300;
            for (int dz = 0; dz < kernel; ++dz)
              for (int dy = 0; dy < kernel; ++dy)
                for (int dx = 0; dx < kernel; ++dx) {
                  const std::size_t iz = oz * stride + dz;
                  const std::size_t iy = oy * stride + dy;
                  const std::size_t ix = ox * stride + dx;
                  const double v = x[((ni * c + ci) * in[0] + iz) * in[1] * in[2] + iy * in[2] + ix];
                  if (v > best) best = v;
                }
            y[(((ni * c + ci) * o[0] + oz) * o[1] + oy) * o[2] + ox] = best;
          }
  return y;
}

inline std::vector<double> linear_reference(const std::vector<double>& x, const std::vector<double>& w,
                                            const std::vector<double>& b, std::size_t n, std::size_t f,
                                            std::size_t o) {
  std::vector<double> y(n * o, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < o; ++j) {
      double acc = b[j];
      for (std::size_t k = 0; k < f; ++k) acc += x[i * f + k] * w[j * f + k];
      y[i * o + j] = acc;
    }
  return y;
}

inline std::vector<double> global_avg_pool_reference(const std::vector<double>& x, std::size_t n,
                                                     std::size_t c, std::size_t spatial) {
  std::vector<double> y(n * c, 0.0);
  for (std::size_t i = 0; i < n * c; ++i) {
    double acc = 0.0;
    for (std::size_t s = 0; s < spatial; ++s) acc += x[i * spatial + s];
    y[i] = acc / static_cast<double>(spatial);
  }
  return y;
}

}  // namespace voxreg::oracle
