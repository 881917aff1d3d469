// SPDX-License-Identifier: Apache-2.0
// Generated by flops_oracle.py. Do not edit.

#pragma once

#include <cstddef>

namespace oracle {

struct SequenceCase {
  std::size_t batch, seq_len, hidden, layers;
  double flops;
};

struct RatioCase {
  double hidden, from, to;
  double ratio;
};

inline constexpr SequenceCase kSequenceCases[] = {
    {1, 4096, 12288, 96, 1504131906797568.0},
    {1, 10485760, 12288, 1, 5.442318674700534e+18},
    {2, 1048576, 4096, 32, 1.17994310237107e+18},
    {8, 2048, 1024, 24, 13194139533312.0},
    {3, 17, 5, 2, 95880.0},
};

inline constexpr RatioCase kRatioCases[] = {
    {12288, 4096, 10485760, 135.68421052631578},
    {4096, 4096, 1048576, 37.42857142857143},
    {1024, 2048, 32768, 4.75},
    {5120, 8192, 8192, 1.0},
};

}  // namespace oracle
