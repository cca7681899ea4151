#include "dlcl/tasks.hpp"

#include <algorithm>
#include <random>

#include "dlcl/error.hpp"

namespace dlcl::train {

std::string to_string(TaskKind kind) {
  switch (kind) {
    case TaskKind::Copy: return "copy";
    case TaskKind::Reverse: return "reverse";
    case TaskKind::Sort: return "sort";
  }
  return "unknown";
}

TaskKind parse_task(const std::string& text) {
  for (auto k : {TaskKind::Copy, TaskKind::Reverse, TaskKind::Sort}) {
    if (to_string(k) == text) return k;
  }
  throw ConfigError("unknown task '" + text + "' (expected copy, reverse or sort)");
}

void TaskSpec::validate() const {
  if (vocab_size <= static_cast<std::size_t>(kFirstPayload)) {
    throw ConfigError("task vocab_size must exceed the 3 special ids");
  }
  if (min_len < 1 || min_len > max_len) throw ConfigError("task needs 1 <= min_len <= max_len");
}

std::size_t Batch::target_tokens() const {
  return static_cast<std::size_t>(
      std::count_if(tgt_out.begin(), tgt_out.end(), [](int id) { return id != kPad; }));
}

std::vector<int> target_payload(TaskKind kind, std::span<const int> payload) {
  std::vector<int> out(payload.begin(), payload.end());
  if (kind == TaskKind::Reverse) std::reverse(out.begin(), out.end());
  if (kind == TaskKind::Sort) std::sort(out.begin(), out.end());
  return out;
}

Batch make_batch(TaskKind kind, const std::vector<std::vector<int>>& payloads) {
  if (payloads.empty()) throw Error("make_batch: no sentences");
  std::vector<std::vector<int>> src, tin, tout;
  for (const auto& p : payloads) {
    if (p.empty()) throw Error("make_batch: empty payload");
    for (int id : p) {
      if (id < kFirstPayload) throw Error("make_batch: payload contains a special id");
    }
    auto t = target_payload(kind, p);
    auto& s = src.emplace_back(p);
    s.push_back(kEos);
    auto& i = tin.emplace_back(1, kBos);
    i.insert(i.end(), t.begin(), t.end());
    auto& o = tout.emplace_back(t);
    o.push_back(kEos);
  }
  Batch b;
  b.src = nn::TokenBatch::from_rows(src, kPad);
  b.tgt_in = nn::TokenBatch::from_rows(tin, kPad);
  b.tgt_out = nn::TokenBatch::from_rows(tout, kPad).ids;
  return b;
}

Batch generate_task_batch(const TaskSpec& spec, std::size_t batch_tokens, std::uint64_t index) {
  spec.validate();
  std::seed_seq seq{static_cast<std::uint32_t>(spec.seed), static_cast<std::uint32_t>(spec.seed >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
  std::mt19937_64 rng(seq);
  std::uniform_int_distribution<std::size_t> len(spec.min_len, spec.max_len);
  std::uniform_int_distribution<int> sym(kFirstPayload, static_cast<int>(spec.vocab_size) - 1);

  std::vector<std::vector<int>> payloads;
  std::size_t used = 0;
  while (true) {
    const std::size_t n = len(rng);
    if (!payloads.empty() && used + n + 1 > batch_tokens) break;
    auto& p = payloads.emplace_back(n);
    for (auto& id : p) id = sym(rng);
    used += n + 1;
  }
  return make_batch(spec.kind, payloads);
}

namespace {

void append_rows(const nn::TokenBatch& from, std::vector<std::vector<int>>& rows) {
  for (std::size_t b = 0; b < from.batch; ++b) {
    std::vector<int> row;
    for (std::size_t t = 0; t < from.length && !from.is_pad(b, t); ++t) row.push_back(from.at(b, t));
    rows.push_back(std::move(row));
  }
}

}  // namespace

Batch concat_batches(std::span<const Batch> parts) {
  if (parts.empty()) throw Error("concat_batches: no parts");
  std::vector<std::vector<int>> src, tin, tout;
  for (const auto& p : parts) {
    append_rows(p.src, src);
    append_rows(p.tgt_in, tin);
    nn::TokenBatch out{p.tgt_in.batch, p.tgt_in.length, p.tgt_out, kPad};
    append_rows(out, tout);
  }
  Batch b;
  b.src = nn::TokenBatch::from_rows(src, kPad);
  b.tgt_in = nn::TokenBatch::from_rows(tin, kPad);
  b.tgt_out = nn::TokenBatch::from_rows(tout, kPad).ids;
  return b;
}

}  // namespace dlcl::train
