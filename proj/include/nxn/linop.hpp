#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "nxn/random.hpp"

namespace nxn {

using Vec = std::vector<double>;

// A linear map R^domain -> R^codomain with an exact adjoint and a flat weight
// vector. The weight vector parametrizes the map linearly, so scaling the
// weights scales the operator.
class LinearOperator {
 public:
  virtual ~LinearOperator() = default;

  virtual std::size_t domain_dim() const = 0;
  virtual std::size_t codomain_dim() const = 0;
  // Number of bias channels in the codomain. Entries of one channel are
  // contiguous, codomain_dim() / codomain_channels() per channel.
  virtual std::size_t codomain_channels() const = 0;

  // out = A x (overwrites out). No size checks.
  virtual void apply_into(std::span<const double> x, std::span<double> out) const = 0;
  // out = A^T y (overwrites out). No size checks.
  virtual void apply_adjoint_into(std::span<const double> y, std::span<double> out) const = 0;
  // grad += d<cot, A x>/d(weights).
  virtual void accumulate_weight_gradient(std::span<const double> x,
                                          std::span<const double> cot,
                                          std::span<double> grad) const = 0;

  virtual std::span<double> weights() = 0;
  virtual std::span<const double> weights() const = 0;
  virtual std::vector<std::size_t> weight_shape() const = 0;
  virtual std::unique_ptr<LinearOperator> clone() const = 0;
  virtual std::string kind() const = 0;

  // Checked versions; throw InvalidInput on dimension mismatch.
  Vec apply(std::span<const double> x) const;
  Vec apply_adjoint(std::span<const double> y) const;
};

class DenseOp final : public LinearOperator {
 public:
  DenseOp(std::size_t rows, std::size_t cols, std::vector<double> entries);
  static DenseOp identity(std::size_t n);
  static DenseOp zeros(std::size_t rows, std::size_t cols);
  static DenseOp random_gaussian(std::size_t rows, std::size_t cols, Rng& rng);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  double at(std::size_t r, std::size_t c) const { return entries_[r * cols_ + c]; }

  std::size_t domain_dim() const override { return cols_; }
  std::size_t codomain_dim() const override { return rows_; }
  std::size_t codomain_channels() const override { return rows_; }
  void apply_into(std::span<const double> x, std::span<double> out) const override;
  void apply_adjoint_into(std::span<const double> y, std::span<double> out) const override;
  void accumulate_weight_gradient(std::span<const double> x, std::span<const double> cot,
                                  std::span<double> grad) const override;
  std::span<double> weights() override { return entries_; }
  std::span<const double> weights() const override { return entries_; }
  std::vector<std::size_t> weight_shape() const override { return {rows_, cols_}; }
  std::unique_ptr<LinearOperator> clone() const override;
  std::string kind() const override { return "dense"; }

 private:
  std::size_t rows_;
  std::size_t cols_;
  std::vector<double> entries_;
};

enum class Padding { zero, circular };

Padding parse_padding(const std::string& name);
std::string to_string(Padding p);

// Stride-1 "same" 2D cross-correlation on images laid out [channel][row][col],
// kernel laid out [out_channel][in_channel][kh][kw]. Applied by direct
// summation through a precomputed im2col gather.
class Conv2dOp final : public LinearOperator {
 public:
  Conv2dOp(std::size_t in_channels, std::size_t out_channels, std::size_t kh, std::size_t kw,
           std::size_t height, std::size_t width, Padding padding, std::vector<double> kernel);

  std::size_t in_channels() const { return in_channels_; }
  std::size_t out_channels() const { return out_channels_; }
  std::size_t kernel_height() const { return kh_; }
  std::size_t kernel_width() const { return kw_; }
  std::size_t height() const { return height_; }
  std::size_t width() const { return width_; }
  Padding padding() const { return padding_; }
  std::span<const double> kernel() const { return kernel_; }

  // Conv with spatially flipped, channel-transposed kernel and the same padding.
  // For odd kernels this is the exact adjoint.
  Conv2dOp flipped_adjoint() const;
  // Same kernel acting on a different spatial shape.
  Conv2dOp with_spatial_shape(std::size_t height, std::size_t width) const;

  std::size_t domain_dim() const override { return in_channels_ * height_ * width_; }
  std::size_t codomain_dim() const override { return out_channels_ * height_ * width_; }
  std::size_t codomain_channels() const override { return out_channels_; }
  void apply_into(std::span<const double> x, std::span<double> out) const override;
  void apply_adjoint_into(std::span<const double> y, std::span<double> out) const override;
  void accumulate_weight_gradient(std::span<const double> x, std::span<const double> cot,
                                  std::span<double> grad) const override;
  std::span<double> weights() override { return kernel_; }
  std::span<const double> weights() const override { return kernel_; }
  std::vector<std::size_t> weight_shape() const override {
    return {out_channels_, in_channels_, kh_, kw_};
  }
  std::unique_ptr<LinearOperator> clone() const override;
  std::string kind() const override { return "conv2d"; }

 private:
  void gather_columns(std::span<const double> x, std::vector<double>& cols) const;

  std::size_t in_channels_, out_channels_, kh_, kw_, height_, width_;
  Padding padding_;
  std::vector<double> kernel_;
  // For each (in_channel, dy, dx, pixel): flat input index, or -1 for padding.
  std::vector<std::int32_t> gather_;
};

// Singular-vector estimates for the power method. u lives in the domain,
// v in the codomain; sigma = <v, A u>.
struct SpectralState {
  Vec u;
  Vec v;
  double sigma = 0.0;

  static SpectralState random(const LinearOperator& op, Rng& rng);
};

// Alternating power iteration u <- A^T v / |A^T v|, v <- A u / |A u|, warm
// started from `state`. Stops early (returning the state reached so far) if an
// intermediate image has norm below 1e-30; for the zero operator this returns
// sigma = 0 with u, v untouched.
SpectralState power_iterate(const LinearOperator& op, SpectralState state, int iters);

// Largest singular value via Jacobi eigenvalues of A^T A. Test oracle; rows and
// cols must be at most 256.
double spectral_norm_exact(const DenseOp& op);

// Materializes any operator as a dense matrix (column by column).
DenseOp to_dense(const LinearOperator& op);

// c * op, as a new operator of the same kind.
std::unique_ptr<LinearOperator> scale(const LinearOperator& op, double c);

}  // namespace nxn
