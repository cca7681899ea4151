#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dlcl/nn.hpp"

namespace dlcl::train {

inline constexpr int kPad = 0;
inline constexpr int kBos = 1;
inline constexpr int kEos = 2;
inline constexpr int kFirstPayload = 3;

enum class TaskKind { Copy, Reverse, Sort };

std::string to_string(TaskKind kind);
TaskKind parse_task(const std::string& text);

struct TaskSpec {
  TaskKind kind = TaskKind::Copy;
  std::size_t vocab_size = 16;
  std::size_t min_len = 4;
  std::size_t max_len = 12;
  std::uint64_t seed = 1;

  void validate() const;
};

// src = payload eos; tgt_in = bos target; tgt_out = target eos.
struct Batch {
  nn::TokenBatch src;
  nn::TokenBatch tgt_in;
  std::vector<int> tgt_out;  // [batch * tgt length], pad-filled

  std::size_t target_tokens() const;
};

std::vector<int> target_payload(TaskKind kind, std::span<const int> payload);

// Builds a batch from explicit payloads.
Batch make_batch(TaskKind kind, const std::vector<std::vector<int>>& payloads);

// Pure function of (spec, batch_tokens, index): sentences are drawn until the
// target token count (eos included) would exceed batch_tokens; at least one.
Batch generate_task_batch(const TaskSpec& spec, std::size_t batch_tokens, std::uint64_t index);

// Row-wise concatenation of batches, padding to the longest row.
Batch concat_batches(std::span<const Batch> parts);

}  // namespace dlcl::train
