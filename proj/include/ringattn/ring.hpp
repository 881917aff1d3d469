// SPDX-License-Identifier: Apache-2.0
//
// Ring runtime: N logical hosts each own one query block and rotate their
// key/value blocks around a ring. At step t host i attends to the block that
// originated at host (i - t) mod N. Forward uses N compute steps and N - 1
// rotations. Backward rotates dK/dV together with K/V and performs one last
// dK/dV-only rotation so every gradient block ends at its origin host.
//
// Two drivers run the same per-host workers:
//   sequential  - one thread, lock-step over hosts; used for debugging and
//                 as the bitwise reference
//   concurrent  - one thread per host, neighbours linked by capacity-one
//                 channels; a host blocks on a full outbox or an empty inbox

#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "ringattn/attention.hpp"
#include "ringattn/ffn.hpp"
#include "ringattn/perf_model.hpp"
#include "ringattn/tensor.hpp"

namespace ringattn {

// ---------------------------------------------------------------------------
// Topology and partitioning
// ---------------------------------------------------------------------------

class RingTopology {
 public:
  explicit RingTopology(std::size_t num_hosts) : n_(num_hosts) {
    if (n_ == 0) throw ArgumentError("ring needs at least one host");
  }

  std::size_t size() const noexcept { return n_; }
  std::size_t successor(std::size_t i) const { return (i + 1) % n_; }
  std::size_t predecessor(std::size_t i) const { return (i + n_ - 1) % n_; }
  // Origin of the key/value block host i holds at step t.
  std::size_t origin_at(std::size_t host, std::size_t step) const {
    return (host + n_ - step % n_) % n_;
  }

 private:
  std::size_t n_;
};

// Splits axis 1 into `parts` equal contiguous pieces.
template <typename T>
std::vector<Tensor<T>> split_rows(const Tensor<T>& x, std::size_t parts) {
  if (x.rank() < 2) throw ShapeError("split_rows needs rank >= 2, got " + to_string(x.shape()));
  if (parts == 0 || x.dim(1) % parts != 0) {
    throw PartitionError("sequence length " + std::to_string(x.dim(1)) +
                         " is not divisible by " + std::to_string(parts) + " hosts");
  }
  const std::size_t outer = x.dim(0), rows = x.dim(1), len = rows / parts;
  const std::size_t inner = x.size() / (outer * rows);
  std::vector<Tensor<T>> out;
  out.reserve(parts);
  for (std::size_t p = 0; p < parts; ++p) {
    Shape shape = x.shape();
    shape[1] = len;
    Tensor<T> piece(shape);
    for (std::size_t o = 0; o < outer; ++o) {
      const T* src = x.raw() + (o * rows + p * len) * inner;
      std::copy(src, src + len * inner, piece.raw() + o * len * inner);
    }
    out.push_back(std::move(piece));
  }
  return out;
}

template <typename T>
Tensor<T> concat_rows(std::span<const Tensor<T>> pieces) {
  if (pieces.empty()) throw ShapeError("concat_rows of nothing");
  Shape shape = pieces[0].shape();
  const std::size_t outer = shape[0], len = shape[1];
  const std::size_t inner = pieces[0].size() / (outer * len);
  shape[1] = len * pieces.size();
  Tensor<T> out(shape);
  for (std::size_t p = 0; p < pieces.size(); ++p) {
    if (pieces[p].shape() != pieces[0].shape()) throw ShapeError("concat_rows: ragged pieces");
    for (std::size_t o = 0; o < outer; ++o) {
      const T* src = pieces[p].raw() + o * len * inner;
      std::copy(src, src + len * inner, out.raw() + (o * shape[1] + p * len) * inner);
    }
  }
  return out;
}

template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& pieces) {
  return concat_rows(std::span<const Tensor<T>>(pieces));
}

// Contiguous equal blocks of x [batch, s, heads, head_dim], one per host.
template <typename T>
std::vector<Block<T>> partition_sequence(const Tensor<T>& x, std::size_t num_hosts,
                                         std::size_t inner_chunk = 0) {
  if (x.rank() != 4) throw ShapeError("partition_sequence expects [batch, s, heads, head_dim]");
  auto pieces = split_rows(x, num_hosts);
  if (inner_chunk != 0) resolve_chunk(inner_chunk, pieces[0].dim(1));
  std::vector<Block<T>> blocks;
  blocks.reserve(num_hosts);
  for (std::size_t i = 0; i < num_hosts; ++i) blocks.emplace_back(std::move(pieces[i]), i, num_hosts);
  return blocks;
}

template <typename T>
Tensor<T> concat_blocks(std::span<const Block<T>> blocks) {
  std::vector<Tensor<T>> pieces;
  for (const auto& b : blocks) pieces.push_back(b.data());
  return concat_rows(pieces);
}

// ---------------------------------------------------------------------------
// Options, report and timing
// ---------------------------------------------------------------------------

enum class RingMode { sequential, concurrent };

inline const char* to_string(RingMode m) {
  return m == RingMode::sequential ? "sequential" : "concurrent";
}

inline RingMode parse_ring_mode(const std::string& s) {
  if (s == "sequential") return RingMode::sequential;
  if (s == "concurrent") return RingMode::concurrent;
  throw ArgumentError("unknown ring mode '" + s + "'");
}

// Test hooks that break the message protocol on host 0 at step 0.
enum class RingFault { none, drop_message, wrong_step, wrong_origin };

struct RingOptions {
  RingMode mode = RingMode::sequential;
  ChunkSizes chunks{};
  bool skip_masked_blocks = false;
  FfnOptions ffn{};
  std::chrono::milliseconds channel_timeout{5000};
  std::uint64_t seed = 0;
  RingFault fault = RingFault::none;
};

struct StepTiming {
  std::size_t step = 0;
  double compute_time = 0;
  double transfer_time = 0;
  double latency = 0;
};

enum class TimingConvention {
  folded,  // two-byte elements folded into the 4cd transfer volume
  strict  // 2 * c * hidden * element_bytes bytes per rotation
};

struct TimingReport {
  double compute_time = 0;   // per step, seconds
  double transfer_time = 0;  // per rotation, seconds
  double step_latency = 0;   // max(compute, transfer)
  double overhead_fraction = 0;
  double total_time = 0;     // all steps of one forward pass
  double compute_only_time = 0;
  std::vector<StepTiming> steps;
};

// Per-step cost of one host: 4 * b * hidden * c^2 FLOPs of attention against
// the transfer of one key and one value block.
inline TimingReport simulate_timing(const ModelConfig& cfg, const HardwareSpec& hw,
                                    TimingConvention convention = TimingConvention::folded) {
  hw.validate();
  if (!cfg.batch || !cfg.block_len || !cfg.hidden || !cfg.hosts || !cfg.element_bytes) {
    throw ArgumentError("simulate_timing needs positive batch, block, hidden, hosts, element size");
  }
  const double b = static_cast<double>(cfg.batch), c = static_cast<double>(cfg.block_len),
               h = static_cast<double>(cfg.hidden);
  TimingReport r;
  r.compute_time = 4.0 * b * h * c * c / hw.flops;
  const double bytes = convention == TimingConvention::folded
                           ? 4.0 * b * c * h
                           : 2.0 * b * c * h * static_cast<double>(cfg.element_bytes);
  r.transfer_time = bytes / hw.bandwidth;
  r.step_latency = std::max(r.compute_time, r.transfer_time);
  r.overhead_fraction = std::max(0.0, r.transfer_time - r.compute_time) / r.compute_time;
  for (std::size_t t = 0; t < cfg.hosts; ++t) {
    const bool rotates = t + 1 < cfg.hosts;
    StepTiming st{t, r.compute_time, rotates ? r.transfer_time : 0.0,
                  rotates ? r.step_latency : r.compute_time};
    r.total_time += st.latency;
    r.compute_only_time += st.compute_time;
    r.steps.push_back(st);
  }
  return r;
}

struct RingReport {
  std::uint64_t seed = 0;
  RingMode mode = RingMode::sequential;
  std::size_t num_hosts = 1;
  std::size_t batch = 1;
  std::size_t block_len = 1;
  std::size_t hidden = 1;
  std::size_t element_bytes = 8;
  std::size_t compute_steps = 0;  // per host
  std::size_t rotations = 0;      // forward, per host
  std::size_t messages = 0;       // all hosts, forward + backward
  // visit_order[i][t]: origin of the key/value block host i used at step t.
  std::vector<std::vector<std::size_t>> visit_order;
  std::vector<std::size_t> forward_peak_blocks;
  std::vector<std::size_t> backward_peak_blocks;
  std::optional<TimingReport> timing;

  bool degenerate_ring() const { return num_hosts == 1; }
};

struct ResidencySummary {
  std::size_t peak_blocks = 0;
  std::vector<std::size_t> per_host;
  double block_elements = 0;  // b * c * h
  double peak_elements = 0;
  double peak_bytes = 0;
  bool within_bound = false;  // peak <= 6 block-equivalents
};

inline constexpr std::size_t kResidencyBound = 6;

inline ResidencySummary memory_audit(const RingReport& report) {
  ResidencySummary s;
  s.per_host = report.forward_peak_blocks;
  for (std::size_t p : s.per_host) s.peak_blocks = std::max(s.peak_blocks, p);
  s.block_elements = static_cast<double>(report.batch) * static_cast<double>(report.block_len) *
                     static_cast<double>(report.hidden);
  s.peak_elements = static_cast<double>(s.peak_blocks) * s.block_elements;
  s.peak_bytes = s.peak_elements * static_cast<double>(report.element_bytes);
  s.within_bound = s.peak_blocks <= kResidencyBound;
  return s;
}

// ---------------------------------------------------------------------------
// Residency and channels
// ---------------------------------------------------------------------------

// Counts live block-sized buffers on one host.
class ResidencyTracker {
 public:
  ResidencyTracker() = default;
  ResidencyTracker(const ResidencyTracker& o) : current_(o.current()), peak_(o.peak()) {}
  ResidencyTracker& operator=(const ResidencyTracker& o) {
    current_ = o.current();
    peak_ = o.peak();
    return *this;
  }

  void acquire(std::size_t blocks) {
    const std::size_t now = current_.fetch_add(blocks) + blocks;
    std::size_t prev = peak_.load();
    while (now > prev && !peak_.compare_exchange_weak(prev, now)) {
    }
  }
  void release(std::size_t blocks) { current_.fetch_sub(blocks); }
  std::size_t current() const { return current_.load(); }
  std::size_t peak() const { return peak_.load(); }

 private:
  std::atomic<std::size_t> current_{0};
  std::atomic<std::size_t> peak_{0};
};

template <typename T>
struct RingMessage {
  std::optional<Block<T>> k, v;
  std::optional<Tensor<T>> dk, dv;
  std::size_t origin = 0;
  std::size_t step = 0;

  std::size_t block_count() const {
    return (k ? 1 : 0) + (v ? 1 : 0) + (dk ? 1 : 0) + (dv ? 1 : 0);
  }
};

class ChannelClosed : public Error {
 public:
  ChannelClosed() : Error("channel closed") {}
};

// Bounded FIFO of capacity one between two neighbouring hosts.
template <typename Msg>
class Channel {
 public:
  void send(Msg msg, std::chrono::milliseconds timeout) {
    std::unique_lock lock(mu_);
    if (!cv_.wait_for(lock, timeout, [&] { return closed_ || !slot_; })) {
      throw DeadlockError("send blocked longer than " + std::to_string(timeout.count()) + " ms");
    }
    if (closed_) throw ChannelClosed();
    slot_.emplace(std::move(msg));
    cv_.notify_all();
  }

  Msg recv(std::chrono::milliseconds timeout) {
    std::unique_lock lock(mu_);
    if (!cv_.wait_for(lock, timeout, [&] { return closed_ || slot_.has_value(); })) {
      throw DeadlockError("receive blocked longer than " + std::to_string(timeout.count()) + " ms");
    }
    if (closed_) throw ChannelClosed();
    Msg msg = std::move(*slot_);
    slot_.reset();
    cv_.notify_all();
    return msg;
  }

  void close() {
    std::lock_guard lock(mu_);
    closed_ = true;
    cv_.notify_all();
  }

 private:
  std::mutex mu_;
  std::condition_variable cv_;
  std::optional<Msg> slot_;
  bool closed_ = false;
};

// ---------------------------------------------------------------------------
// Drivers
// ---------------------------------------------------------------------------
//
// A worker provides:
//   void prologue();  void epilogue();
//   std::size_t steps() const;  bool rotates_after(std::size_t step) const;
//   void compute(std::size_t step);
//   Message outgoing(std::size_t step);
//   void incoming(Message msg, std::size_t step);

namespace detail {

template <typename Worker>
void run_sequential(std::vector<Worker>& workers, const RingTopology& topo) {
  using Msg = typename decltype(workers[0].outgoing(0))::value_type;
  for (auto& w : workers) w.prologue();
  const std::size_t steps = workers.front().steps();
  for (std::size_t t = 0; t < steps; ++t) {
    for (auto& w : workers) w.compute(t);
    if (!workers.front().rotates_after(t)) continue;
    std::vector<std::optional<Msg>> inbox(workers.size());
    for (std::size_t i = 0; i < workers.size(); ++i) {
      auto msg = workers[i].outgoing(t);
      if (msg) inbox[topo.successor(i)].emplace(std::move(*msg));
    }
    for (std::size_t i = 0; i < workers.size(); ++i) {
      if (!inbox[i]) {
        throw DeadlockError("host " + std::to_string(i) + " would wait forever at step " +
                            std::to_string(t));
      }
      workers[i].incoming(std::move(*inbox[i]), t);
    }
  }
  for (auto& w : workers) w.epilogue();
}

template <typename Worker>
void run_concurrent(std::vector<Worker>& workers, const RingTopology& topo,
                    std::chrono::milliseconds timeout) {
  using Msg = typename decltype(workers[0].outgoing(0))::value_type;
  const std::size_t n = workers.size();
  std::vector<Channel<Msg>> inbox(n);
  std::mutex err_mu;
  std::exception_ptr first_error;
  bool primary_recorded = false;

  auto fail = [&](std::exception_ptr e, bool primary) {
    {
      std::lock_guard lock(err_mu);
      if (!first_error || (primary && !primary_recorded)) {
        first_error = e;
        primary_recorded = primary;
      }
    }
    for (auto& ch : inbox) ch.close();
  };

  std::vector<std::thread> threads;
  threads.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    threads.emplace_back([&, i] {
      try {
        auto& w = workers[i];
        w.prologue();
        for (std::size_t t = 0; t < w.steps(); ++t) {
          w.compute(t);
          if (!w.rotates_after(t)) continue;
          if (auto msg = w.outgoing(t)) inbox[topo.successor(i)].send(std::move(*msg), timeout);
          w.incoming(inbox[i].recv(timeout), t);
        }
        w.epilogue();
      } catch (const ChannelClosed&) {
        fail(std::current_exception(), false);
      } catch (...) {
        fail(std::current_exception(), true);
      }
    });
  }
  for (auto& th : threads) th.join();
  if (first_error) std::rethrow_exception(first_error);
}

template <typename Worker>
void run_ring(std::vector<Worker>& workers, const RingTopology& topo, const RingOptions& opt) {
  if (opt.mode == RingMode::sequential) {
    run_sequential(workers, topo);
  } else {
    run_concurrent(workers, topo, opt.channel_timeout);
  }
}

template <typename T>
void apply_fault(RingMessage<T>& msg, std::size_t host, std::size_t step, RingFault fault) {
  if (host != 0 || step != 0) return;
  if (fault == RingFault::wrong_step) msg.step += 1;
  if (fault == RingFault::wrong_origin) msg.origin += 1;
}

inline void check_message(std::size_t host, std::size_t step, std::size_t msg_step,
                          std::size_t msg_origin, std::size_t expected_origin) {
  if (msg_step != step) {
    throw ProtocolError("host " + std::to_string(host) + " expected step " + std::to_string(step) +
                        ", received " + std::to_string(msg_step));
  }
  if (msg_origin != expected_origin) {
    throw ProtocolError("host " + std::to_string(host) + " expected block " +
                        std::to_string(expected_origin) + ", received " +
                        std::to_string(msg_origin));
  }
}

// -- attention forward ------------------------------------------------------

template <typename T>
class AttentionForwardWorker {
 public:
  AttentionForwardWorker(std::size_t host, const RingTopology& topo, Block<T> q, Block<T> k,
                         Block<T> v, const BiasSpec<T>& bias, const RingOptions& opt)
      : host_(host), topo_(&topo), opt_(&opt), bias_(&bias), q_(std::move(q)),
        k_(std::move(k)), v_(std::move(v)) {}

  void prologue() {
    acc_ = SoftmaxAccumulator<T>::like(q_);
    residency_.acquire(4);  // query, key, value, output
  }

  std::size_t steps() const { return topo_->size(); }
  bool rotates_after(std::size_t t) const { return t + 1 < topo_->size(); }

  void compute(std::size_t t) {
    if (k_.index() != topo_->origin_at(host_, t)) {
      throw ProtocolError("host " + std::to_string(host_) + " holds block " +
                          std::to_string(k_.index()) + " at step " + std::to_string(t));
    }
    attend_block(acc_, q_, k_, v_, *bias_, opt_->chunks, opt_->skip_masked_blocks);
    visits_.push_back(k_.index());
  }

  std::optional<RingMessage<T>> outgoing(std::size_t t) {
    if (opt_->fault == RingFault::drop_message && host_ == 0 && t == 0) return std::nullopt;
    RingMessage<T> msg{k_, v_, std::nullopt, std::nullopt, k_.index(), t};
    apply_fault(msg, host_, t, opt_->fault);
    ++sent_;
    return msg;
  }

  void incoming(RingMessage<T> msg, std::size_t t) {
    residency_.acquire(msg.block_count());  // receive buffers
    check_message(host_, t, msg.step, msg.origin, topo_->origin_at(host_, t + 1));
    if (!msg.k || !msg.v) throw ProtocolError("forward message without key/value blocks");
    k_ = std::move(*msg.k);
    v_ = std::move(*msg.v);
    residency_.release(2);  // previous key/value
  }

  void epilogue() { saved_ = save_state(acc_, q_); }

  const SavedForwardState<T>& saved() const { return saved_; }
  SavedForwardState<T>& saved() { return saved_; }
  const Block<T>& query() const { return q_; }
  const std::vector<std::size_t>& visits() const { return visits_; }
  std::size_t peak() const { return residency_.peak(); }
  std::size_t sent() const { return sent_; }

 private:
  std::size_t host_;
  const RingTopology* topo_;
  const RingOptions* opt_;
  const BiasSpec<T>* bias_;
  Block<T> q_, k_, v_;
  SoftmaxAccumulator<T> acc_;
  SavedForwardState<T> saved_;
  std::vector<std::size_t> visits_;
  ResidencyTracker residency_;
  std::size_t sent_ = 0;
};

// -- attention backward -----------------------------------------------------

template <typename T>
class AttentionBackwardWorker {
 public:
  AttentionBackwardWorker(std::size_t host, const RingTopology& topo, Block<T> q, Block<T> k,
                          Block<T> v, Tensor<T> upstream, const SavedForwardState<T>& saved,
                          const BiasSpec<T>& bias, const RingOptions& opt)
      : host_(host), topo_(&topo), opt_(&opt), bias_(&bias), saved_(&saved), q_(std::move(q)),
        k_(std::move(k)), v_(std::move(v)), g_(std::move(upstream)) {}

  void prologue() {
    dq_ = Tensor<T>(q_.data().shape());
    dk_ = Tensor<T>(k_.data().shape());
    dv_ = Tensor<T>(v_.data().shape());
    // query, upstream, saved output, dq, key, value, dk, dv
    residency_.acquire(8);
  }

  std::size_t steps() const { return topo_->size(); }
  bool rotates_after(std::size_t) const { return topo_->size() > 1; }

  void compute(std::size_t t) {
    if (k_.index() != topo_->origin_at(host_, t)) {
      throw ProtocolError("host " + std::to_string(host_) + " holds block " +
                          std::to_string(k_.index()) + " at backward step " + std::to_string(t));
    }
    block_backward(q_, k_, v_, g_, *saved_, *bias_, dq_, dk_, dv_, opt_->chunks,
                   opt_->skip_masked_blocks);
  }

  std::optional<RingMessage<T>> outgoing(std::size_t t) {
    if (opt_->fault == RingFault::drop_message && host_ == 0 && t == 0) return std::nullopt;
    const bool last = t + 1 == steps();
    RingMessage<T> msg;
    msg.origin = k_.index();
    msg.step = t;
    if (!last) {
      msg.k = k_;
      msg.v = v_;
    }
    msg.dk = std::move(dk_);
    msg.dv = std::move(dv_);
    apply_fault(msg, host_, t, opt_->fault);
    ++sent_;
    return msg;
  }

  void incoming(RingMessage<T> msg, std::size_t t) {
    residency_.acquire(msg.block_count());
    check_message(host_, t, msg.step, msg.origin, topo_->origin_at(host_, t + 1));
    if (!msg.dk || !msg.dv) throw ProtocolError("backward message without gradient blocks");
    const bool last = t + 1 == steps();
    if (!last) {
      if (!msg.k || !msg.v) throw ProtocolError("backward message without key/value blocks");
      k_ = std::move(*msg.k);
      v_ = std::move(*msg.v);
    }
    dk_ = std::move(*msg.dk);
    dv_ = std::move(*msg.dv);
    residency_.release(msg.block_count());
  }

  void epilogue() {}

  Tensor<T>& dq() { return dq_; }
  Tensor<T>& dk() { return dk_; }
  Tensor<T>& dv() { return dv_; }
  std::size_t peak() const { return residency_.peak(); }
  std::size_t sent() const { return sent_; }

 private:
  std::size_t host_;
  const RingTopology* topo_;
  const RingOptions* opt_;
  const BiasSpec<T>* bias_;
  const SavedForwardState<T>* saved_;
  Block<T> q_, k_, v_;
  Tensor<T> g_, dq_, dk_, dv_;
  ResidencyTracker residency_;
  std::size_t sent_ = 0;
};

template <typename T>
void check_blocks(std::span<const Block<T>> q, std::span<const Block<T>> k,
                  std::span<const Block<T>> v) {
  const std::size_t n = q.size();
  if (n == 0 || k.size() != n || v.size() != n) {
    throw PartitionError("need one query, key and value block per host");
  }
  for (std::size_t i = 0; i < n; ++i) {
    for (const Block<T>* b : {&q[i], &k[i], &v[i]}) {
      if (b->index() != i || b->count() != n) {
        throw PartitionError("block " + std::to_string(i) + " carries index " +
                             std::to_string(b->index()) + " of " + std::to_string(b->count()));
      }
      if (b->data().shape() != q[0].data().shape()) {
        throw PartitionError("host blocks must share one shape");
      }
    }
  }
}

template <typename T>
RingReport make_report(std::size_t n, const Block<T>& q0, const RingOptions& opt) {
  RingReport r;
  r.seed = opt.seed;
  r.mode = opt.mode;
  r.num_hosts = n;
  r.batch = q0.batch();
  r.block_len = q0.len();
  r.hidden = q0.hidden();
  r.element_bytes = sizeof(T);
  r.compute_steps = n;
  r.rotations = n - 1;
  return r;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Attention over the ring
// ---------------------------------------------------------------------------

template <typename T>
struct RingForwardResult {
  std::vector<Tensor<T>> outputs;  // per host, [batch, c, heads, head_dim]
  std::vector<SavedForwardState<T>> saved;
  RingReport report;
};

template <typename T>
RingForwardResult<T> ring_forward(std::span<const Block<T>> q, std::span<const Block<T>> k,
                                  std::span<const Block<T>> v, const BiasSpec<T>& bias,
                                  const RingOptions& opt = {}) {
  detail::check_blocks(q, k, v);
  const std::size_t n = q.size();
  bias.check_covers(q[0].sequence_length(), k[0].sequence_length());
  RingTopology topo(n);
  std::vector<detail::AttentionForwardWorker<T>> workers;
  workers.reserve(n);
  for (std::size_t i = 0; i < n; ++i) workers.emplace_back(i, topo, q[i], k[i], v[i], bias, opt);
  detail::run_ring(workers, topo, opt);

  RingForwardResult<T> res;
  res.report = detail::make_report(n, q[0], opt);
  for (auto& w : workers) {
    res.outputs.push_back(w.saved().output);
    res.saved.push_back(std::move(w.saved()));
    res.report.visit_order.push_back(w.visits());
    res.report.forward_peak_blocks.push_back(w.peak());
    res.report.messages += w.sent();
  }
  return res;
}

template <typename T>
RingForwardResult<T> ring_forward(const std::vector<Block<T>>& q, const std::vector<Block<T>>& k,
                                  const std::vector<Block<T>>& v, const BiasSpec<T>& bias,
                                  const RingOptions& opt = {}) {
  return ring_forward<T>(std::span<const Block<T>>(q), std::span<const Block<T>>(k),
                         std::span<const Block<T>>(v), bias, opt);
}

template <typename T>
struct RingBackwardResult {
  std::vector<Tensor<T>> dq, dk, dv;  // per host, at the block's origin
  RingReport report;
};

template <typename T>
RingBackwardResult<T> ring_backward(std::span<const Tensor<T>> upstream,
                                    std::span<const Block<T>> q, std::span<const Block<T>> k,
                                    std::span<const Block<T>> v,
                                    std::span<const SavedForwardState<T>> saved,
                                    const BiasSpec<T>& bias, const RingOptions& opt = {}) {
  detail::check_blocks(q, k, v);
  const std::size_t n = q.size();
  if (upstream.size() != n || saved.size() != n) {
    throw StateError("need one upstream gradient and saved state per host");
  }
  RingTopology topo(n);
  std::vector<detail::AttentionBackwardWorker<T>> workers;
  workers.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    workers.emplace_back(i, topo, q[i], k[i], v[i], upstream[i], saved[i], bias, opt);
  }
  detail::run_ring(workers, topo, opt);

  RingBackwardResult<T> res;
  res.report = detail::make_report(n, q[0], opt);
  for (auto& w : workers) {
    res.dq.push_back(std::move(w.dq()));
    res.dk.push_back(std::move(w.dk()));
    res.dv.push_back(std::move(w.dv()));
    res.report.backward_peak_blocks.push_back(w.peak());
    res.report.messages += w.sent();
  }
  return res;
}

template <typename T>
RingBackwardResult<T> ring_backward(const std::vector<Tensor<T>>& upstream,
                                    const std::vector<Block<T>>& q, const std::vector<Block<T>>& k,
                                    const std::vector<Block<T>>& v,
                                    const std::vector<SavedForwardState<T>>& saved,
                                    const BiasSpec<T>& bias, const RingOptions& opt = {}) {
  return ring_backward<T>(std::span<const Tensor<T>>(upstream), std::span<const Block<T>>(q),
                          std::span<const Block<T>>(k), std::span<const Block<T>>(v),
                          std::span<const SavedForwardState<T>>(saved), bias, opt);
}

// ---------------------------------------------------------------------------
// Full transformer layer over the ring
// ---------------------------------------------------------------------------
//
// Each host projects its own input block to Q/K/V, runs ring attention,
// then applies the output projection, residuals and feedforward locally.
// Residency counts cover the attention path only.

template <typename T>
struct LayerSaved {
  Tensor<T> x;  // [batch, c, hidden]
  Block<T> q, k, v;
  SavedForwardState<T> attention;
  Tensor<T> y;  // after the attention residual
};

namespace detail {

template <typename T>
class LayerForwardWorker {
 public:
  LayerForwardWorker(std::size_t host, const RingTopology& topo, const Tensor<T>& x,
                     const LayerWeights<T>& w, const BiasSpec<T>& bias, const RingOptions& opt)
      : host_(host), topo_(&topo), opt_(&opt), bias_(&bias), w_(&w) {
    saved_.x = x;
  }

  void prologue() {
    auto qkv = qkv_projection(saved_.x, *w_);
    const std::size_t n = topo_->size();
    saved_.q = Block<T>(std::move(qkv.q), host_, n);
    saved_.k = Block<T>(std::move(qkv.k), host_, n);
    saved_.v = Block<T>(std::move(qkv.v), host_, n);
    inner_.emplace(host_, *topo_, saved_.q, saved_.k, saved_.v, *bias_, *opt_);
    inner_->prologue();
  }
  std::size_t steps() const { return topo_->size(); }
  bool rotates_after(std::size_t t) const { return inner_->rotates_after(t); }
  void compute(std::size_t t) { inner_->compute(t); }
  std::optional<RingMessage<T>> outgoing(std::size_t t) { return inner_->outgoing(t); }
  void incoming(RingMessage<T> msg, std::size_t t) { inner_->incoming(std::move(msg), t); }

  void epilogue() {
    inner_->epilogue();
    saved_.attention = std::move(inner_->saved());
    auto out = transformer_block(saved_.x, saved_.attention.output, *w_, opt_->ffn);
    saved_.y = std::move(out.y);
    z_ = std::move(out.z);
  }

  LayerSaved<T>& saved() { return saved_; }
  Tensor<T>& output() { return z_; }
  const AttentionForwardWorker<T>& attention() const { return *inner_; }

 private:
  std::size_t host_;
  const RingTopology* topo_;
  const RingOptions* opt_;
  const BiasSpec<T>* bias_;
  const LayerWeights<T>* w_;
  LayerSaved<T> saved_;
  Tensor<T> z_;
  std::optional<AttentionForwardWorker<T>> inner_;
};

template <typename T>
class LayerBackwardWorker {
 public:
  LayerBackwardWorker(std::size_t host, const RingTopology& topo, const Tensor<T>& upstream,
                      const LayerSaved<T>& saved, const LayerWeights<T>& w,
                      const BiasSpec<T>& bias, const RingOptions& opt)
      : host_(host), topo_(&topo), opt_(&opt), bias_(&bias), w_(&w), saved_(&saved),
        upstream_(&upstream),
        dw_(LayerWeights<T>::zeros(w.hidden(), w.heads, w.ffn.inner() / w.hidden())) {}

  void prologue() {
    if (saved_->x.rank() != 3 || saved_->q.index() != host_) {
      throw StateError("layer saved state does not belong to host " + std::to_string(host_));
    }
    auto back = transformer_block_backward(saved_->x, saved_->attention.output, saved_->y, *w_,
                                           *upstream_, dw_);
    dx_ = std::move(back.dx_residual);
    inner_.emplace(host_, *topo_, saved_->q, saved_->k, saved_->v, std::move(back.d_attn_out),
                   saved_->attention, *bias_, *opt_);
    inner_->prologue();
  }
  std::size_t steps() const { return topo_->size(); }
  bool rotates_after(std::size_t t) const { return inner_->rotates_after(t); }
  void compute(std::size_t t) { inner_->compute(t); }
  std::optional<RingMessage<T>> outgoing(std::size_t t) { return inner_->outgoing(t); }
  void incoming(RingMessage<T> msg, std::size_t t) { inner_->incoming(std::move(msg), t); }

  void epilogue() {
    inner_->epilogue();
    QkvTensors<T> grads{std::move(inner_->dq()), std::move(inner_->dk()), std::move(inner_->dv())};
    add_into(dx_, qkv_projection_backward(saved_->x, *w_, grads, dw_));
  }

  Tensor<T>& dx() { return dx_; }
  LayerWeights<T>& dweights() { return dw_; }
  const AttentionBackwardWorker<T>& attention() const { return *inner_; }

 private:
  std::size_t host_;
  const RingTopology* topo_;
  const RingOptions* opt_;
  const BiasSpec<T>* bias_;
  const LayerWeights<T>* w_;
  const LayerSaved<T>* saved_;
  const Tensor<T>* upstream_;
  Tensor<T> dx_;
  LayerWeights<T> dw_;
  std::optional<AttentionBackwardWorker<T>> inner_;
};

}  // namespace detail

template <typename T>
struct RingLayerForwardResult {
  std::vector<Tensor<T>> outputs;  // per host, [batch, c, hidden]
  std::vector<LayerSaved<T>> saved;
  RingReport report;
};

// x: one [batch, c, hidden] block per host.
template <typename T>
RingLayerForwardResult<T> ring_layer_forward(const std::vector<Tensor<T>>& x,
                                             const LayerWeights<T>& w, const BiasSpec<T>& bias,
                                             const RingOptions& opt = {}) {
  w.validate();
  const std::size_t n = x.size();
  if (n == 0) throw PartitionError("need one input block per host");
  for (const auto& xi : x) {
    if (xi.rank() != 3 || xi.shape() != x[0].shape() || xi.dim(2) != w.hidden()) {
      throw ShapeError("layer input blocks must share shape [batch, c, hidden]");
    }
  }
  bias.check_covers(n * x[0].dim(1), n * x[0].dim(1));
  RingTopology topo(n);
  std::vector<detail::LayerForwardWorker<T>> workers;
  workers.reserve(n);
  for (std::size_t i = 0; i < n; ++i) workers.emplace_back(i, topo, x[i], w, bias, opt);
  detail::run_ring(workers, topo, opt);

  RingLayerForwardResult<T> res;
  res.report = detail::make_report(n, workers[0].saved().q, opt);
  for (auto& wk : workers) {
    res.outputs.push_back(std::move(wk.output()));
    res.saved.push_back(std::move(wk.saved()));
    res.report.visit_order.push_back(wk.attention().visits());
    res.report.forward_peak_blocks.push_back(wk.attention().peak());
    res.report.messages += wk.attention().sent();
  }
  return res;
}

template <typename T>
struct RingLayerBackwardResult {
  std::vector<Tensor<T>> dx;  // per host
  LayerWeights<T> dweights;   // summed over hosts in host order
  RingReport report;
};

template <typename T>
RingLayerBackwardResult<T> ring_layer_backward(const std::vector<Tensor<T>>& upstream,
                                               const std::vector<LayerSaved<T>>& saved,
                                               const LayerWeights<T>& w, const BiasSpec<T>& bias,
                                               const RingOptions& opt = {}) {
  w.validate();
  const std::size_t n = saved.size();
  if (n == 0 || upstream.size() != n) {
    throw StateError("need one upstream gradient and saved state per host");
  }
  RingTopology topo(n);
  std::vector<detail::LayerBackwardWorker<T>> workers;
  workers.reserve(n);
  for (std::size_t i = 0; i < n; ++i) workers.emplace_back(i, topo, upstream[i], saved[i], w, bias, opt);
  detail::run_ring(workers, topo, opt);

  RingLayerBackwardResult<T> res;
  res.report = detail::make_report(n, saved[0].q, opt);
  res.dweights = LayerWeights<T>::zeros(w.hidden(), w.heads, w.ffn.inner() / w.hidden());
  for (auto& wk : workers) {
    res.dx.push_back(std::move(wk.dx()));
    add_into(res.dweights, wk.dweights());
    res.report.backward_peak_blocks.push_back(wk.attention().peak());
    res.report.messages += wk.attention().sent();
  }
  return res;
}

}  // namespace ringattn
