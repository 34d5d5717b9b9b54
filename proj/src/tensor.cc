#include "prcnn/tensor.h"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace prcnn {

namespace {

std::size_t checked_volume(const Tensor::Shape& s) {
  std::size_t v = 1;
  for (int d : s) {
    if (d < 0) {
      throw std::invalid_argument("tensor shape has a negative dimension: " +
                                  shape_string(s));
    }
    v *= static_cast<std::size_t>(d);
  }
  return v;
}

}  // namespace

Tensor::Tensor(int n, int c, int h, int w, double fill)
    : Tensor(Shape{n, c, h, w}, fill) {}

Tensor::Tensor(Shape shape, double fill)
    : shape_(shape), data_(checked_volume(shape), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(shape), data_(std::move(data)) {
  if (data_.size() != checked_volume(shape_)) {
    throw std::invalid_argument("tensor data length " +
                                std::to_string(data_.size()) +
                                " does not match shape " + shape_string(shape_));
  }
}

std::span<double> Tensor::plane(int n, int c) {
  const std::size_t hw = static_cast<std::size_t>(shape_[2]) * shape_[3];
  return {data_.data() + index(n, c, 0, 0), hw};
}

std::span<const double> Tensor::plane(int n, int c) const {
  const std::size_t hw = static_cast<std::size_t>(shape_[2]) * shape_[3];
  return {data_.data() + index(n, c, 0, 0), hw};
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(),
                     [](double v) { return std::isfinite(v); });
}

std::string shape_string(const Tensor::Shape& s) {
  std::ostringstream os;
  os << '[' << s[0] << ", " << s[1] << ", " << s[2] << ", " << s[3] << ']';
  return os.str();
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(what) + ": shape " +
                                shape_string(b.shape()) + " != expected " +
                                shape_string(a.shape()));
  }
}

Tensor concat_channels(std::span<const Tensor> parts) {
  if (parts.empty()) return {};
  const auto& first = parts.front();
  int channels = 0;
  for (const auto& p : parts) {
    if (p.n() != first.n() || p.h() != first.h() || p.w() != first.w()) {
      throw std::invalid_argument("concat_channels: shape " +
                                  shape_string(p.shape()) +
                                  " incompatible with " +
                                  shape_string(first.shape()));
    }
    channels += p.c();
  }
  Tensor out(first.n(), channels, first.h(), first.w());
  for (int n = 0; n < first.n(); ++n) {
    int offset = 0;
    for (const auto& p : parts) {
      for (int c = 0; c < p.c(); ++c) {
        auto src = p.plane(n, c);
        std::copy(src.begin(), src.end(), out.plane(n, offset + c).begin());
      }
      offset += p.c();
    }
  }
  return out;
}

std::vector<Tensor> split_channels(const Tensor& whole,
                                   std::span<const int> channels) {
  int total = 0;
  for (int c : channels) total += c;
  if (total != whole.c()) {
    throw std::invalid_argument("split_channels: block sizes sum to " +
                                std::to_string(total) + " but tensor has " +
                                std::to_string(whole.c()) + " channels");
  }
  std::vector<Tensor> out;
  out.reserve(channels.size());
  int offset = 0;
  for (int block : channels) {
    Tensor part(whole.n(), block, whole.h(), whole.w());
    for (int n = 0; n < whole.n(); ++n) {
      for (int c = 0; c < block; ++c) {
        auto src = whole.plane(n, offset + c);
        std::copy(src.begin(), src.end(), part.plane(n, c).begin());
      }
    }
    offset += block;
    out.push_back(std::move(part));
  }
  return out;
}

Tensor concat_batch(std::span<const Tensor> parts) {
  if (parts.empty()) return {};
  const auto& first = parts.front();
  int batch = 0;
  std::vector<double> data;
  for (const auto& p : parts) {
    if (p.c() != first.c() || p.h() != first.h() || p.w() != first.w()) {
      throw std::invalid_argument("concat_batch: shape " +
                                  shape_string(p.shape()) +
                                  " incompatible with " +
                                  shape_string(first.shape()));
    }
    batch += p.n();
    data.insert(data.end(), p.data().begin(), p.data().end());
  }
  return Tensor({batch, first.c(), first.h(), first.w()}, std::move(data));
}

Tensor slice_batch(const Tensor& t, int begin, int end) {
  if (begin < 0 || end > t.n() || begin > end) {
    throw std::invalid_argument("slice_batch: range [" + std::to_string(begin) +
                                ", " + std::to_string(end) +
                                ") outside batch of " + std::to_string(t.n()));
  }
  const std::size_t per = static_cast<std::size_t>(t.c()) * t.h() * t.w();
  std::vector<double> data(t.data().begin() + begin * per,
                           t.data().begin() + end * per);
  return Tensor({end - begin, t.c(), t.h(), t.w()}, std::move(data));
}

void add_inplace(Tensor& dst, const Tensor& src) {
  check_same_shape(dst, src, "add_inplace");
  auto d = dst.data();
  auto s = src.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  }
  return m;
}

}  // namespace prcnn
