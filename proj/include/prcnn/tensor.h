#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace prcnn {

// Dense NCHW array of doubles. Weights of 2-D convolutions reuse the same
// carrier with shape [c_out, c_in, k_h, k_w].
class Tensor {
 public:
  using Shape = std::array<int, 4>;

  Tensor() = default;
  Tensor(int n, int c, int h, int w, double fill = 0.0);
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  int n() const { return shape_[0]; }
  int c() const { return shape_[1]; }
  int h() const { return shape_[2]; }
  int w() const { return shape_[3]; }
  const Shape& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::size_t index(int n, int c, int h, int w) const {
    return ((static_cast<std::size_t>(n) * shape_[1] + c) * shape_[2] + h) *
               shape_[3] +
           w;
  }
  double& at(int n, int c, int h, int w) { return data_[index(n, c, h, w)]; }
  double at(int n, int c, int h, int w) const {
    return data_[index(n, c, h, w)];
  }

  // One spatial plane (n, c), row-major h*w.
  std::span<double> plane(int n, int c);
  std::span<const double> plane(int n, int c) const;

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double>& storage() { return data_; }

  void fill(double v);
  bool all_finite() const;

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_{0, 0, 0, 0};
  std::vector<double> data_;
};

std::string shape_string(const Tensor::Shape& s);

// Throws std::invalid_argument unless a.shape() == b.shape().
void check_same_shape(const Tensor& a, const Tensor& b, const char* what);

// Concatenates along the channel axis; all parts share n, h, w.
Tensor concat_channels(std::span<const Tensor> parts);
// Splits `whole` back into channel blocks of the given sizes.
std::vector<Tensor> split_channels(const Tensor& whole,
                                   std::span<const int> channels);
// Concatenates / slices along the batch axis.
Tensor concat_batch(std::span<const Tensor> parts);
Tensor slice_batch(const Tensor& t, int begin, int end);

void add_inplace(Tensor& dst, const Tensor& src);
double max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace prcnn
