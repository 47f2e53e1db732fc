#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "gradcheck.hpp"

namespace vftest {

struct GradCase {
  std::string name;
  std::function<GradCheck(std::uint64_t seed)> run;
};

// Every differentiable primitive and composite block, each parameterized by a
// seed that draws a fresh random instance (inputs and weights).
std::vector<GradCase> primitive_grad_cases();
std::vector<GradCase> block_grad_cases();
std::vector<GradCase> model_grad_cases();

}  // namespace vftest
