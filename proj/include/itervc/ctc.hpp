// Copyright (c) 2026 the itervc authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "itervc/common.hpp"

namespace itervc {

// CTC negative log-likelihood of `target` under per-frame `logits`
// (frames x classes, blank is a valid class index). Computed with the
// forward-backward algorithm in log space at double precision.
//
// Throws if the target is longer than the frame count. Returns +inf when no
// alignment exists (adjacent repeated tokens need a separating blank, so a
// target can be infeasible even when |target| <= frames).
//
// When dlogits is non-null it receives dLoss/dlogits of the same shape.
double ctc_loss(const Mat& logits, const std::vector<int>& target, int blank_index,
                Mat* dlogits = nullptr);

}  // namespace itervc
