#pragma once

#include "b2p/synth.hpp"
#include "test_util.hpp"

namespace b2p::test {

// A few 32-pixel synthetic images and a matching desk-scale config.
inline TrainingConfig tiny_config() {
  TrainingConfig c = bench_config();
  c.synth.scene.image_size = 32;
  c.synth.scene.defect_image_fraction = 1.0;
  c.synth.train_images = 8;
  c.synth.val_images = 2;
  c.synth.test_images = 2;
  c.model = ModelConfig::desk_scale(32);
  c.model.num_classes = 2;
  c.epochs = 2;
  c.batch_size = 4;
  return c;
}

}  // namespace b2p::test
