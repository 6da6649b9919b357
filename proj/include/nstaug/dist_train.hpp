#pragma once

#include <condition_variable>
#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace nstaug {

/// Raised on every surviving worker when another worker fails.
class GroupAborted : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bounded single-producer/single-consumer rendezvous channel.
template <typename T>
class Channel {
 public:
  explicit Channel(std::size_t capacity = 1) : capacity_(capacity) {}

  void send(T value) {
    std::unique_lock lock(mu_);
    cv_.wait(lock, [&] { return closed_ || queue_.size() < capacity_; });
    if (closed_) throw GroupAborted("channel closed");
    queue_.push_back(std::move(value));
    cv_.notify_all();
  }

  T receive() {
    std::unique_lock lock(mu_);
    cv_.wait(lock, [&] { return closed_ || !queue_.empty(); });
    if (queue_.empty()) throw GroupAborted("channel closed");
    T v = std::move(queue_.front());
    queue_.pop_front();
    cv_.notify_all();
    return v;
  }

  void close() {
    std::lock_guard lock(mu_);
    closed_ = true;
    cv_.notify_all();
  }

 private:
  std::size_t capacity_;
  std::mutex mu_;
  std::condition_variable cv_;
  std::deque<T> queue_;
  bool closed_ = false;
};

/// Per-rank traffic of one collective, counted in elements and messages.
struct CollectiveStats {
  std::size_t phases = 0;
  std::size_t messages_sent = 0;
  std::size_t elements_sent = 0;
};

/// W ranks connected in a ring; rank r sends to (r+1) mod W.
///
/// Every collective must be entered by all ranks concurrently, each from its
/// own thread. Once aborted, all pending and future calls throw GroupAborted.
class Ring {
 public:
  explicit Ring(std::size_t world_size);

  std::size_t world_size() const { return world_; }

  /// In-place mean over ranks: scatter-reduce then all-gather over W equal
  /// chunks, 2(W-1) phases. Lengths not divisible by W are zero-padded.
  CollectiveStats allreduce_mean(std::size_t rank, std::span<double> values);

  /// Overwrites every rank's buffer with rank 0's, passed along the ring.
  CollectiveStats broadcast(std::size_t rank, std::span<double> values);

  void abort();

 private:
  std::vector<double> exchange(std::size_t rank, std::vector<double> outgoing);

  std::size_t world_;
  std::vector<std::unique_ptr<Channel<std::vector<double>>>> links_;  // links_[r]: r -> r+1
};

struct GradientVector {
  std::vector<double> values;
  std::size_t source_rank = 0;
};

/// Averages one vector per rank through a W-thread ring. Element counts must
/// match. Returns the averaged vector held by each rank.
std::vector<GradientVector> ring_allreduce(const std::vector<GradientVector>& grads,
                                           std::vector<CollectiveStats>* stats = nullptr);

/// Copies rank 0's parameters to every worker through the ring.
std::vector<std::vector<double>> broadcast_params(std::size_t world_size, const std::vector<std::vector<double>>& params);

/// Deterministic cost model of the ring collective: phase and traffic
/// counts for a vector of `length` elements over W ranks.
CollectiveStats ring_cost_model(std::size_t world_size, std::size_t length);

/// Ranks 0..W-1 with disjoint shards covering [0, dataset_size).
struct WorkerGroup {
  std::size_t world_size = 1;
  std::uint64_t seed = 0;
  std::vector<std::vector<std::size_t>> shards;  // shards[rank] -> dataset indices

  /// Round-robin assignment of a seeded permutation of the dataset.
  static WorkerGroup make(std::size_t world_size, std::size_t dataset_size, std::uint64_t seed);
  void validate(std::size_t dataset_size) const;
};

/// Runs fn(rank) on W threads and rethrows the first failure after all
/// workers stop. `on_failure` runs once, before joining, so blocked peers
/// can be released.
void run_workers(std::size_t world_size, const std::function<void(std::size_t)>& fn,
                 const std::function<void()>& on_failure = {});

/// Splits jobs [0, n) across W workers (job i goes to worker i mod W).
void parallel_for_shards(std::size_t world_size, std::size_t n, const std::function<void(std::size_t job)>& fn);

/// Differentiable objective with batch-mean loss, shared by the single- and
/// multi-worker trainers.
class Objective {
 public:
  virtual ~Objective() = default;
  virtual std::size_t parameter_count() const = 0;
  /// Mean loss over `batch`; writes its gradient into `grad` (overwritten).
  /// `noise_seed` is shared by all ranks within a step; stochastic layers
  /// (dropout) should derive per-sample noise from it and the sample index.
  virtual double loss_and_gradient(std::span<const double> params, std::span<const std::size_t> batch,
                                   std::uint64_t noise_seed, std::span<double> grad) const = 0;
};

struct SgdConfig {
  std::size_t steps = 10;
  std::size_t batch_per_worker = 8;
  double learning_rate = 0.01;
  double momentum = 0.9;
  std::uint64_t seed = 0;
};

struct TrainTrace {
  std::vector<double> params;
  std::vector<double> step_loss;                 // mean loss over all workers' batches
  std::vector<std::uint64_t> replica_checksums;  // one per rank, after the last step
  std::vector<double> first_step_gradient;       // averaged gradient of step 1
};

class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(const std::string& what, std::size_t step) : std::runtime_error(what), step(step) {}
  std::size_t step;
};

/// Batch indices drawn by `rank` at `step` from its shard.
std::vector<std::size_t> shard_batch(const WorkerGroup& group, std::size_t rank, std::size_t step,
                                     std::size_t batch);

/// Synchronous data-parallel SGD with momentum: rank-0 broadcast, per-rank
/// gradients on shard batches, ring all-reduce, identical updates.
TrainTrace distributed_train(const WorkerGroup& group, const Objective& objective, std::vector<double> initial,
                             const SgdConfig& cfg);

/// The same loop in one process without any collective, for comparison.
TrainTrace single_process_train(const WorkerGroup& group, const Objective& objective, std::vector<double> initial,
                                const SgdConfig& cfg);

struct ScalingRow {
  std::size_t workers = 1;
  double parallel_seconds = 0.0;
  double sequential_seconds = 0.0;
  double speedup = 1.0;
};

struct ScalingReport {
  std::vector<ScalingRow> rows;
  std::size_t hardware_threads = 0;
  bool under_provisioned = false;  // some W exceeded hardware_threads
  std::string workload;
};

/// Times `workload(W)` for each W and reports S = T_1 / T_W.
ScalingReport speedup_benchmark(const std::function<void(std::size_t workers)>& workload,
                                const std::vector<std::size_t>& worker_counts, std::string workload_name);

/// Table with columns W, T_p, T_s, S plus the published reference rows.
std::string format_scaling_table(const ScalingReport& report);

}  // namespace nstaug
