#pragma once

#include <random>
#include <string>
#include <vector>

#include "xwd/random.hpp"
#include "xwd/windowing.hpp"

namespace xwd::test {

// Two windows over a 4x8x8 grid; class shifts the mean of window "a" by
// +-`shift` and leaves "b" as pure noise.
struct ToyCohort {
  std::vector<WindowedStack> stacks;

  std::vector<const WindowedStack*> slice(std::size_t begin, std::size_t end) const {
    std::vector<const WindowedStack*> out;
    for (std::size_t i = begin; i < end; ++i) out.push_back(&stacks[i]);
    return out;
  }
};

inline ToyCohort toy_cohort(std::size_t n, double shift, std::uint64_t seed) {
  ToyCohort c;
  Rng rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  for (std::size_t i = 0; i < n; ++i) {
    WindowedStack s;
    s.patient_id = "p" + std::to_string(i);
    s.label = static_cast<int>(i % 2);
    for (const char* w : {"a", "b"}) {
      Tensor t = Tensor::volume(4, 8, 8);
      const double m = (std::string(w) == "a") ? (s.label ? shift : -shift) : 0.0;
      for (auto& v : t.data()) v = m + g(rng);
      s.arrays.emplace(w, std::move(t));
    }
    c.stacks.push_back(std::move(s));
  }
  return c;
}

}  // namespace xwd::test
