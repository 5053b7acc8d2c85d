#pragma once

// Shared fixtures for the unit tests.

#include <atomic>
#include <filesystem>
#include <string>
#include <unistd.h>

#include "tsn/image.hpp"
#include "tsn/rng.hpp"
#include "tsn/tensor.hpp"

namespace tsn::test {

inline Tensor random_tensor(Shape s, RandomState& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(s);
  for (auto& v : t.vec()) v = rng.uniform(lo, hi);
  return t;
}

inline Image random_image(int h, int w, RandomState& rng) {
  Image img(h, w);
  for (auto& v : img.pixels()) v = rng.uniform();
  return img;
}

inline Mask random_binary(int h, int w, RandomState& rng, double p = 0.5) {
  Mask m(h, w);
  for (auto& v : m.pixels()) v = rng.bernoulli(p) ? 1.0 : 0.0;
  return m;
}

inline Mask random_prob(int h, int w, RandomState& rng) {
  Mask m(h, w);
  for (auto& v : m.pixels()) v = rng.uniform(0.01, 0.99);
  return m;
}

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("tsn_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

}  // namespace tsn::test
