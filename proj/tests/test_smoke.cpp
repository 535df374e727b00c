#include <gtest/gtest.h>
#include "voxloc/ops.hpp"
#include "voxloc/worldgen.hpp"

TEST(Smoke, Compiles) {
  voxloc::Tape<double> tape;
  auto x = tape.input(voxloc::Tensor<double>::full(voxloc::Shape::mat(2, 3), 1.0));
  auto y = voxloc::ops::sum_all(tape, voxloc::ops::sigmoid(tape, x));
  tape.backward(y);
  EXPECT_NEAR(tape.value(y).item(), 6 * 0.7310585786300049, 1e-12);
}
