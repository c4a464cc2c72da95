#pragma once

#include "rarecell/encoder.hpp"
#include "support.hpp"

namespace support {

inline rarecell::EncoderConfig mini_encoder(int latent, bool bias_free = false, int side = kSide) {
  return rarecell::EncoderConfig{"resnet18-mini", latent, side, bias_free};
}

}  // namespace support
