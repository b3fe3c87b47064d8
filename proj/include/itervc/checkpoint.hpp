// Copyright (c) 2026 the itervc authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "itervc/common.hpp"

#include <json.hpp>

#include <map>

namespace itervc {

// Self-describing model container: a JSON header (kind, config echo,
// vocabulary, provenance, tensor index) followed by row-major float64 blobs.
struct Checkpoint {
  nlohmann::json header;
  std::map<std::string, Mat> tensors;
};

void save_checkpoint(const fs::path& path, const nlohmann::json& header,
                     const std::vector<std::pair<std::string, const Mat*>>& tensors);
Checkpoint load_checkpoint(const fs::path& path);

}  // namespace itervc
