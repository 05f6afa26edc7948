#pragma once

#include <fftw3.h>

#include <cmath>
#include <complex>
#include <cstddef>
#include <memory>
#include <mutex>
#include <span>
#include <vector>

#include "emstop/errors.hpp"
#include "emstop/image.hpp"
#include "emstop/kl.hpp"
#include "emstop/rng.hpp"

namespace emstop {

// Linear forward model contract: apply, adjoint apply, and the precomputed
// column-sum vector H^T 1 needed by the EM normalizer. Implementations are
// immutable after construction; apply/apply_adjoint are safe to call
// concurrently.
class ForwardOperator {
 public:
  virtual ~ForwardOperator() = default;

  virtual std::size_t input_size() const = 0;
  virtual std::size_t output_size() const = 0;

  virtual void apply(std::span<const double> x, std::span<double> out) const = 0;
  virtual void apply_adjoint(std::span<const double> y,
                             std::span<double> out) const = 0;

  std::vector<double> apply(std::span<const double> x) const {
    std::vector<double> out(output_size());
    apply(x, out);
    return out;
  }
  std::vector<double> apply_adjoint(std::span<const double> y) const {
    std::vector<double> out(input_size());
    apply_adjoint(y, out);
    return out;
  }

  // H^T 1, strictly positive.
  std::span<const double> column_sums() const { return column_sums_; }

 protected:
  // Call at the end of the derived constructor.
  void init_column_sums() {
    std::vector<double> ones(output_size(), 1.0);
    column_sums_ = apply_adjoint(ones);
    for (double c : column_sums_)
      if (!(c > 0.0))
        throw ValidationError("ForwardOperator: column sums must be > 0");
  }

  std::vector<double> column_sums_;
};

// Exact matrix realization, kept as the small-instance oracle against which
// the FFT path is checked.
class DenseOperator final : public ForwardOperator {
 public:
  DenseOperator(std::size_t n_out, std::size_t n_in,
                std::vector<double> row_major)
      : n_out_(n_out), n_in_(n_in), a_(std::move(row_major)) {
    if (a_.size() != n_out_ * n_in_)
      throw ValidationError("DenseOperator: entry count mismatch");
    require_nonnegative(a_, "DenseOperator entries");
    init_column_sums();
  }

  std::size_t input_size() const override { return n_in_; }
  std::size_t output_size() const override { return n_out_; }

  using ForwardOperator::apply;
  using ForwardOperator::apply_adjoint;

  void apply(std::span<const double> x, std::span<double> out) const override {
    check(x.size() == n_in_ && out.size() == n_out_);
    for (std::size_t i = 0; i < n_out_; ++i) {
      double s = 0.0;
      const double* row = &a_[i * n_in_];
      for (std::size_t j = 0; j < n_in_; ++j) s += row[j] * x[j];
      out[i] = s;
    }
  }

  void apply_adjoint(std::span<const double> y,
                     std::span<double> out) const override {
    check(y.size() == n_out_ && out.size() == n_in_);
    for (std::size_t j = 0; j < n_in_; ++j) out[j] = 0.0;
    for (std::size_t i = 0; i < n_out_; ++i) {
      const double* row = &a_[i * n_in_];
      for (std::size_t j = 0; j < n_in_; ++j) out[j] += row[j] * y[i];
    }
  }

  static DenseOperator identity(std::size_t n) {
    std::vector<double> a(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) a[i * n + i] = 1.0;
    return DenseOperator(n, n, std::move(a));
  }

 private:
  static void check(bool ok) {
    if (!ok) throw ValidationError("DenseOperator: size mismatch");
  }

  std::size_t n_out_, n_in_;
  std::vector<double> a_;
};

// Nonnegative kernel with unit sum and a declared center pixel.
struct Psf {
  Image image;
  int center_x = 0;
  int center_y = 0;

  static Psf from_image(Image img) {
    require_nonnegative(img.values, "Psf");
    const double s = kahan_total(img.values);
    if (std::abs(s - 1.0) > 1e-12)
      throw ValidationError("Psf: weights must sum to 1");
    Psf p;
    p.center_x = img.width / 2;
    p.center_y = img.height / 2;
    p.image = std::move(img);
    return p;
  }
};

// Normalizes a nonnegative image to unit sum.
inline Psf normalized_psf(Image img) {
  require_nonnegative(img.values, "Psf");
  const double s = kahan_total(img.values);
  if (!(s > 0.0)) throw ValidationError("Psf: weights must not be all zero");
  for (double& v : img.values) v /= s;
  return Psf::from_image(std::move(img));
}

// Discretized isotropic Gaussian, unit sum, centered at (W/2, H/2).
inline Psf gaussian_psf(int width, int height, double sigma) {
  if (!(sigma > 0.0)) throw ValidationError("gaussian_psf: sigma must be > 0");
  Image img(width, height);
  const int cx = width / 2;
  const int cy = height / 2;
  const double inv2s2 = 1.0 / (2.0 * sigma * sigma);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      const double dx = x - cx;
      const double dy = y - cy;
      img.at(x, y) = std::exp(-(dx * dx + dy * dy) * inv2s2);
    }
  return normalized_psf(std::move(img));
}

// Count-noise PSF: scale the base kernel up to expected counts, draw Poisson
// noise, renormalize. Resamples in the (vanishing-probability) event of an
// all-zero draw.
inline Psf count_noise_psf(const Psf& base, double scale, RngStream& rng) {
  if (!(scale > 0.0))
    throw ValidationError("count_noise_psf: scale must be > 0");
  Image mean(base.image.width, base.image.height);
  for (std::size_t i = 0; i < mean.size(); ++i)
    mean.values[i] = scale * base.image.values[i];
  for (;;) {
    Image counts = sample_poisson_image(mean, rng);
    if (kahan_total(counts.values) > 0.0) {
      Psf p = normalized_psf(std::move(counts));
      p.center_x = base.center_x;
      p.center_y = base.center_y;
      return p;
    }
  }
}

namespace detail {

// FFTW's planner is not reentrant; executions are.
inline std::mutex& fftw_planner_mutex() {
  static std::mutex m;
  return m;
}

struct FftwPlanDeleter {
  void operator()(fftw_plan p) const {
    if (p) {
      std::lock_guard<std::mutex> lock(fftw_planner_mutex());
      fftw_destroy_plan(p);
    }
  }
};

using FftwPlanPtr =
    std::unique_ptr<std::remove_pointer_t<fftw_plan>, FftwPlanDeleter>;

}  // namespace detail

// Circular (periodic) convolution with a unit-sum kernel, realized with FFTs.
// The adjoint is correlation with the same kernel. A delta kernel at the
// declared PSF center yields the identity map.
class ConvolutionOperator final : public ForwardOperator {
 public:
  ConvolutionOperator(const Psf& psf, int width, int height)
      : w_(width), h_(height), n_(static_cast<std::size_t>(width) * height) {
    if (width < 1 || height < 1)
      throw ValidationError("ConvolutionOperator: dimensions must be >= 1");
    if (psf.image.width > width || psf.image.height > height)
      throw ValidationError(
          "ConvolutionOperator: psf dims must not exceed image dims");

    freq_size_ = static_cast<std::size_t>(h_) * (w_ / 2 + 1);

    // Embed the kernel so its center lands on pixel (0, 0) with wraparound.
    std::vector<double> kernel(n_, 0.0);
    for (int py = 0; py < psf.image.height; ++py)
      for (int px = 0; px < psf.image.width; ++px) {
        const int kx = wrap(px - psf.center_x, w_);
        const int ky = wrap(py - psf.center_y, h_);
        kernel[static_cast<std::size_t>(ky) * w_ + kx] += psf.image.at(px, py);
      }

    std::vector<std::complex<double>> freq(freq_size_);
    {
      std::lock_guard<std::mutex> lock(detail::fftw_planner_mutex());
      // FFTW_UNALIGNED so the plans accept any caller-provided arrays.
      forward_.reset(fftw_plan_dft_r2c_2d(
          h_, w_, kernel.data(), reinterpret_cast<fftw_complex*>(freq.data()),
          FFTW_ESTIMATE | FFTW_UNALIGNED));
      inverse_.reset(fftw_plan_dft_c2r_2d(
          h_, w_, reinterpret_cast<fftw_complex*>(freq.data()), kernel.data(),
          FFTW_ESTIMATE | FFTW_UNALIGNED));
      if (!forward_ || !inverse_)
        throw NumericalError("ConvolutionOperator: FFTW planning failed");
    }

    fftw_execute_dft_r2c(forward_.get(), kernel.data(),
                         reinterpret_cast<fftw_complex*>(freq.data()));
    kernel_hat_ = std::move(freq);

    init_column_sums();
  }

  int width() const { return w_; }
  int height() const { return h_; }
  std::size_t input_size() const override { return n_; }
  std::size_t output_size() const override { return n_; }

  using ForwardOperator::apply;
  using ForwardOperator::apply_adjoint;

  void apply(std::span<const double> x, std::span<double> out) const override {
    transform(x, out, /*conjugate=*/false);
  }

  void apply_adjoint(std::span<const double> y,
                     std::span<double> out) const override {
    transform(y, out, /*conjugate=*/true);
  }

 private:
  static int wrap(int v, int n) { return ((v % n) + n) % n; }

  void transform(std::span<const double> in, std::span<double> out,
                 bool conjugate) const {
    if (in.size() != n_ || out.size() != n_)
      throw ValidationError("ConvolutionOperator: size mismatch");
    // Per-call scratch keeps concurrent apply() race-free.
    std::vector<double> real(in.begin(), in.end());
    std::vector<std::complex<double>> freq(freq_size_);
    fftw_execute_dft_r2c(forward_.get(), real.data(),
                         reinterpret_cast<fftw_complex*>(freq.data()));
    const double inv_n = 1.0 / static_cast<double>(n_);
    if (conjugate) {
      for (std::size_t i = 0; i < freq_size_; ++i)
        freq[i] *= std::conj(kernel_hat_[i]) * inv_n;
    } else {
      for (std::size_t i = 0; i < freq_size_; ++i)
        freq[i] *= kernel_hat_[i] * inv_n;
    }
    fftw_execute_dft_c2r(inverse_.get(),
                         reinterpret_cast<fftw_complex*>(freq.data()),
                         out.data());
  }

  int w_, h_;
  std::size_t n_;
  std::size_t freq_size_ = 0;
  std::vector<std::complex<double>> kernel_hat_;
  detail::FftwPlanPtr forward_;
  detail::FftwPlanPtr inverse_;
};

}  // namespace emstop
