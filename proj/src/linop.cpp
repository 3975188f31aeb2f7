#include "nxn/linop.hpp"

#include <algorithm>
#include <cmath>

#include "nxn/errors.hpp"
#include "nxn/linalg.hpp"

namespace nxn {

Vec LinearOperator::apply(std::span<const double> x) const {
  require_size(x.size(), domain_dim(), "apply");
  Vec out(codomain_dim());
  apply_into(x, out);
  return out;
}

Vec LinearOperator::apply_adjoint(std::span<const double> y) const {
  require_size(y.size(), codomain_dim(), "apply_adjoint");
  Vec out(domain_dim());
  apply_adjoint_into(y, out);
  return out;
}

// ---------------------------------------------------------------- DenseOp

DenseOp::DenseOp(std::size_t rows, std::size_t cols, std::vector<double> entries)
    : rows_(rows), cols_(cols), entries_(std::move(entries)) {
  require_size(entries_.size(), rows * cols, "DenseOp entries");
  if (!all_finite(entries_)) throw InvalidInput("DenseOp: non-finite entry");
}

DenseOp DenseOp::identity(std::size_t n) {
  std::vector<double> e(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) e[i * n + i] = 1.0;
  return DenseOp(n, n, std::move(e));
}

DenseOp DenseOp::zeros(std::size_t rows, std::size_t cols) {
  return DenseOp(rows, cols, std::vector<double>(rows * cols, 0.0));
}

DenseOp DenseOp::random_gaussian(std::size_t rows, std::size_t cols, Rng& rng) {
  return DenseOp(rows, cols, rng.normal_vector(rows * cols));
}

void DenseOp::apply_into(std::span<const double> x, std::span<double> out) const {
  for (std::size_t r = 0; r < rows_; ++r) {
    const double* row = entries_.data() + r * cols_;
    double s = 0.0;
    for (std::size_t c = 0; c < cols_; ++c) s += row[c] * x[c];
    out[r] = s;
  }
}

void DenseOp::apply_adjoint_into(std::span<const double> y, std::span<double> out) const {
  std::fill(out.begin(), out.end(), 0.0);
  for (std::size_t r = 0; r < rows_; ++r) {
    const double* row = entries_.data() + r * cols_;
    const double yr = y[r];
    for (std::size_t c = 0; c < cols_; ++c) out[c] += row[c] * yr;
  }
}

void DenseOp::accumulate_weight_gradient(std::span<const double> x, std::span<const double> cot,
                                         std::span<double> grad) const {
  for (std::size_t r = 0; r < rows_; ++r) {
    double* g = grad.data() + r * cols_;
    const double cr = cot[r];
    for (std::size_t c = 0; c < cols_; ++c) g[c] += cr * x[c];
  }
}

std::unique_ptr<LinearOperator> DenseOp::clone() const { return std::make_unique<DenseOp>(*this); }

// ---------------------------------------------------------------- Conv2dOp

Padding parse_padding(const std::string& name) {
  if (name == "zero") return Padding::zero;
  if (name == "circular") return Padding::circular;
  throw InvalidInput("unknown padding '" + name + "'");
}

std::string to_string(Padding p) { return p == Padding::zero ? "zero" : "circular"; }

Conv2dOp::Conv2dOp(std::size_t in_channels, std::size_t out_channels, std::size_t kh,
                   std::size_t kw, std::size_t height, std::size_t width, Padding padding,
                   std::vector<double> kernel)
    : in_channels_(in_channels),
      out_channels_(out_channels),
      kh_(kh),
      kw_(kw),
      height_(height),
      width_(width),
      padding_(padding),
      kernel_(std::move(kernel)) {
  if (kh % 2 == 0 || kw % 2 == 0) throw InvalidInput("Conv2dOp: kernel sizes must be odd");
  if (in_channels == 0 || out_channels == 0 || height == 0 || width == 0)
    throw InvalidInput("Conv2dOp: empty shape");
  require_size(kernel_.size(), out_channels * in_channels * kh * kw, "Conv2dOp kernel");
  if (!all_finite(kernel_)) throw InvalidInput("Conv2dOp: non-finite kernel entry");

  const std::size_t pixels = height * width;
  const auto ph = static_cast<long>(kh / 2);
  const auto pw = static_cast<long>(kw / 2);
  const auto h = static_cast<long>(height);
  const auto w = static_cast<long>(width);
  gather_.resize(in_channels * kh * kw * pixels);
  std::size_t k = 0;
  for (std::size_t ic = 0; ic < in_channels; ++ic) {
    for (std::size_t dy = 0; dy < kh; ++dy) {
      for (std::size_t dx = 0; dx < kw; ++dx, ++k) {
        std::int32_t* g = gather_.data() + k * pixels;
        for (long y = 0; y < h; ++y) {
          for (long x = 0; x < w; ++x) {
            long sy = y + static_cast<long>(dy) - ph;
            long sx = x + static_cast<long>(dx) - pw;
            if (padding == Padding::circular) {
              sy = ((sy % h) + h) % h;
              sx = ((sx % w) + w) % w;
            }
            const bool inside = sy >= 0 && sy < h && sx >= 0 && sx < w;
            g[y * w + x] = inside ? static_cast<std::int32_t>(
                                        static_cast<long>(ic) * h * w + sy * w + sx)
                                  : -1;
          }
        }
      }
    }
  }
}

void Conv2dOp::gather_columns(std::span<const double> x, std::vector<double>& cols) const {
  cols.resize(gather_.size());
  for (std::size_t i = 0; i < gather_.size(); ++i) {
    const std::int32_t src = gather_[i];
    cols[i] = src >= 0 ? x[static_cast<std::size_t>(src)] : 0.0;
  }
}

void Conv2dOp::apply_into(std::span<const double> x, std::span<double> out) const {
  thread_local std::vector<double> cols;
  gather_columns(x, cols);
  const std::size_t pixels = height_ * width_;
  const std::size_t taps = in_channels_ * kh_ * kw_;
  for (std::size_t o = 0; o < out_channels_; ++o) {
    double* dst = out.data() + o * pixels;
    std::fill(dst, dst + pixels, 0.0);
    const double* krow = kernel_.data() + o * taps;
    for (std::size_t k = 0; k < taps; ++k) {
      const double wgt = krow[k];
      const double* src = cols.data() + k * pixels;
      for (std::size_t p = 0; p < pixels; ++p) dst[p] += wgt * src[p];
    }
  }
}

void Conv2dOp::apply_adjoint_into(std::span<const double> y, std::span<double> out) const {
  thread_local std::vector<double> cols;
  const std::size_t pixels = height_ * width_;
  const std::size_t taps = in_channels_ * kh_ * kw_;
  cols.assign(taps * pixels, 0.0);
  for (std::size_t o = 0; o < out_channels_; ++o) {
    const double* src = y.data() + o * pixels;
    const double* krow = kernel_.data() + o * taps;
    for (std::size_t k = 0; k < taps; ++k) {
      const double wgt = krow[k];
      double* dst = cols.data() + k * pixels;
      for (std::size_t p = 0; p < pixels; ++p) dst[p] += wgt * src[p];
    }
  }
  std::fill(out.begin(), out.end(), 0.0);
  for (std::size_t i = 0; i < gather_.size(); ++i) {
    const std::int32_t dst = gather_[i];
    if (dst >= 0) out[static_cast<std::size_t>(dst)] += cols[i];
  }
}

void Conv2dOp::accumulate_weight_gradient(std::span<const double> x, std::span<const double> cot,
                                          std::span<double> grad) const {
  thread_local std::vector<double> cols;
  gather_columns(x, cols);
  const std::size_t pixels = height_ * width_;
  const std::size_t taps = in_channels_ * kh_ * kw_;
  for (std::size_t o = 0; o < out_channels_; ++o) {
    const double* c = cot.data() + o * pixels;
    double* g = grad.data() + o * taps;
    for (std::size_t k = 0; k < taps; ++k) {
      const double* src = cols.data() + k * pixels;
      double s = 0.0;
      for (std::size_t p = 0; p < pixels; ++p) s += c[p] * src[p];
      g[k] += s;
    }
  }
}

Conv2dOp Conv2dOp::flipped_adjoint() const {
  std::vector<double> flipped(kernel_.size());
  for (std::size_t o = 0; o < out_channels_; ++o)
    for (std::size_t i = 0; i < in_channels_; ++i)
      for (std::size_t dy = 0; dy < kh_; ++dy)
        for (std::size_t dx = 0; dx < kw_; ++dx) {
          const std::size_t src = ((o * in_channels_ + i) * kh_ + dy) * kw_ + dx;
          const std::size_t dst =
              ((i * out_channels_ + o) * kh_ + (kh_ - 1 - dy)) * kw_ + (kw_ - 1 - dx);
          flipped[dst] = kernel_[src];
        }
  return Conv2dOp(out_channels_, in_channels_, kh_, kw_, height_, width_, padding_,
                  std::move(flipped));
}

Conv2dOp Conv2dOp::with_spatial_shape(std::size_t height, std::size_t width) const {
  return Conv2dOp(in_channels_, out_channels_, kh_, kw_, height, width, padding_, kernel_);
}

std::unique_ptr<LinearOperator> Conv2dOp::clone() const {
  return std::make_unique<Conv2dOp>(*this);
}

// ---------------------------------------------------------------- spectral

SpectralState SpectralState::random(const LinearOperator& op, Rng& rng) {
  SpectralState s;
  s.u = rng.unit_vector(op.domain_dim());
  s.v = rng.unit_vector(op.codomain_dim());
  s.sigma = 0.0;
  return s;
}

SpectralState power_iterate(const LinearOperator& op, SpectralState state, int iters) {
  require_size(state.u.size(), op.domain_dim(), "power_iterate u");
  require_size(state.v.size(), op.codomain_dim(), "power_iterate v");
  if (iters < 1) throw InvalidInput("power_iterate: iters must be >= 1");
  constexpr double kVanishing = 1e-30;

  Vec u_next(op.domain_dim());
  Vec v_next(op.codomain_dim());
  for (int k = 0; k < iters; ++k) {
    op.apply_adjoint_into(state.v, u_next);
    const double nu = norm2(u_next);
    if (!(nu >= kVanishing)) {
      state.sigma = 0.0;
      return state;
    }
    for (auto& e : u_next) e /= nu;
    op.apply_into(u_next, v_next);
    const double nv = norm2(v_next);
    if (!(nv >= kVanishing)) {
      state.sigma = 0.0;
      return state;
    }
    for (auto& e : v_next) e /= nv;
    state.u.swap(u_next);
    state.v.swap(v_next);
    // <v, A u> with v = A u / |A u| equals |A u|.
    state.sigma = nv;
  }
  return state;
}

double spectral_norm_exact(const DenseOp& op) {
  if (op.rows() > 256 || op.cols() > 256)
    throw InvalidInput("spectral_norm_exact: operator larger than 256 x 256");
  if (!all_finite(op.weights())) throw InvalidInput("spectral_norm_exact: non-finite entry");
  const std::size_t n = op.cols();
  std::vector<double> gram(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i; j < n; ++j) {
      double s = 0.0;
      for (std::size_t r = 0; r < op.rows(); ++r) s += op.at(r, i) * op.at(r, j);
      gram[i * n + j] = s;
      gram[j * n + i] = s;
    }
  const auto eig = jacobi_eigenvalues(std::move(gram), n);
  const double top = eig.values.empty() ? 0.0 : eig.values.back();
  return std::sqrt(std::max(0.0, top));
}

DenseOp to_dense(const LinearOperator& op) {
  const std::size_t rows = op.codomain_dim();
  const std::size_t cols = op.domain_dim();
  std::vector<double> entries(rows * cols);
  Vec e(cols, 0.0);
  Vec col(rows);
  for (std::size_t c = 0; c < cols; ++c) {
    e[c] = 1.0;
    op.apply_into(e, col);
    e[c] = 0.0;
    for (std::size_t r = 0; r < rows; ++r) entries[r * cols + c] = col[r];
  }
  return DenseOp(rows, cols, std::move(entries));
}

std::unique_ptr<LinearOperator> scale(const LinearOperator& op, double c) {
  if (!std::isfinite(c)) throw InvalidInput("scale: non-finite factor");
  auto out = op.clone();
  for (auto& w : out->weights()) w *= c;
  return out;
}

}  // namespace nxn
