#pragma once

#include <filesystem>
#include <random>
#include <string>

#include "einmemo/dataset.hpp"
#include "einmemo/image.hpp"
#include "einmemo/toy_inpainter.hpp"

namespace einmemo::testkit {

inline Image random_image(std::mt19937_64& rng, int c, int h, int w) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Image img(c, h, w);
  for (double& v : img.data()) v = u(rng);
  return img;
}

inline Mask random_mask(std::mt19937_64& rng, int h, int w, double p = 0.5) {
  std::bernoulli_distribution b(p);
  Mask m(h, w);
  for (auto& v : m.data()) v = b(rng) ? 1 : 0;
  return m;
}

// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("einmemo_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

// Small but fully trained toy configuration for tests.
inline ToyTrainConfig tiny_toy_config(uint64_t seed = 0) {
  ToyTrainConfig c;
  c.seed = seed;
  c.tokenizer_epochs = 4;
  c.tokenizer_patches_per_epoch = 12000;
  c.predictor_epochs = 3;
  return c;
}

}  // namespace einmemo::testkit
