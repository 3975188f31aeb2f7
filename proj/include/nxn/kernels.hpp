#pragma once

// Elementwise and pooling kernels shared by the taped and un-taped forward
// passes; both paths call exactly these so their results agree bit-for-bit.

#include <cstddef>
#include <span>

#include "nxn/activation.hpp"

namespace nxn::kernels {

// out = a + c * b
inline void axpy(std::span<const double> a, double c, std::span<const double> b,
                 std::span<double> out) {
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + c * b[i];
}

inline void add_bias(std::span<const double> x, std::span<const double> bias,
                     std::span<double> out) {
  const std::size_t per = x.size() / bias.size();
  for (std::size_t ch = 0; ch < bias.size(); ++ch) {
    const double b = bias[ch];
    for (std::size_t p = 0; p < per; ++p) out[ch * per + p] = x[ch * per + p] + b;
  }
}

inline void activate(const Activation& act, std::span<const double> x, std::span<double> out) {
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = act(x[i]);
}

inline void avg_pool2(std::span<const double> x, const ImageShape& in, std::span<double> out) {
  const std::size_t oh = in.height / 2;
  const std::size_t ow = in.width / 2;
  for (std::size_t c = 0; c < in.channels; ++c) {
    const double* src = x.data() + c * in.pixels();
    double* dst = out.data() + c * oh * ow;
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t xx = 0; xx < ow; ++xx) {
        const double* p = src + (2 * y) * in.width + 2 * xx;
        dst[y * ow + xx] = 0.25 * (p[0] + p[1] + p[in.width] + p[in.width + 1]);
      }
  }
}

inline void global_pool(std::span<const double> x, const ImageShape& in, std::span<double> out) {
  const std::size_t pix = in.pixels();
  for (std::size_t c = 0; c < in.channels; ++c) {
    double s = 0.0;
    for (std::size_t p = 0; p < pix; ++p) s += x[c * pix + p];
    out[c] = s / static_cast<double>(pix);
  }
}

}  // namespace nxn::kernels
