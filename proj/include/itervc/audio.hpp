// Copyright (c) 2026 the itervc authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "itervc/common.hpp"

namespace itervc {

struct Waveform {
  std::vector<double> samples;  // mono, in [-1, 1]
  int sample_rate_hz = 24000;
};

// 16-bit PCM mono only; anything else is rejected.
Waveform read_wav(const fs::path& path);
void write_wav(const fs::path& path, const Waveform& wav);

}  // namespace itervc
