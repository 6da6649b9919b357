#include "nstaug/dist_train.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <iomanip>
#include <set>
#include <sstream>
#include <thread>

#include "nstaug/image.hpp"
#include "nstaug/rng.hpp"
#include "nstaug/tensor.hpp"

namespace nstaug {

Ring::Ring(std::size_t world_size) : world_(world_size) {
  if (world_size == 0) throw ShapeError("Ring: world size must be >= 1");
  for (std::size_t r = 0; r < world_; ++r) links_.push_back(std::make_unique<Channel<std::vector<double>>>(1));
}

void Ring::abort() {
  for (auto& l : links_) l->close();
}

std::vector<double> Ring::exchange(std::size_t rank, std::vector<double> outgoing) {
  links_[rank]->send(std::move(outgoing));
  return links_[(rank + world_ - 1) % world_]->receive();
}

CollectiveStats Ring::allreduce_mean(std::size_t rank, std::span<double> values) {
  if (rank >= world_) throw ShapeError("allreduce_mean: rank out of range");
  CollectiveStats st;
  if (world_ == 1) return st;
  const std::size_t w = world_;
  const std::size_t chunk = (values.size() + w - 1) / w;
  std::vector<double> buf(chunk * w, 0.0);
  std::copy(values.begin(), values.end(), buf.begin());
  auto slice = [&](std::size_t c) { return std::span<double>(buf).subspan(c * chunk, chunk); };
  auto send_chunk = [&](std::size_t c) {
    auto s = slice(c);
    ++st.messages_sent;
    st.elements_sent += chunk;
    return exchange(rank, std::vector<double>(s.begin(), s.end()));
  };

  // scatter-reduce: after w-1 phases rank r owns the full sum of chunk r+1
  for (std::size_t s = 0; s + 1 < w; ++s) {
    const std::size_t send_c = (rank + w - s) % w;
    const std::size_t recv_c = (rank + w - s - 1) % w;
    const auto in = send_chunk(send_c);
    auto dst = slice(recv_c);
    for (std::size_t i = 0; i < chunk; ++i) dst[i] += in[i];
    ++st.phases;
  }
  for (double& v : slice((rank + 1) % w)) v /= static_cast<double>(w);

  // all-gather
  for (std::size_t s = 0; s + 1 < w; ++s) {
    const std::size_t send_c = (rank + 1 + w - s) % w;
    const std::size_t recv_c = (rank + w - s) % w;
    const auto in = send_chunk(send_c);
    std::copy(in.begin(), in.end(), slice(recv_c).begin());
    ++st.phases;
  }
  std::copy(buf.begin(), buf.begin() + static_cast<std::ptrdiff_t>(values.size()), values.begin());
  return st;
}

CollectiveStats Ring::broadcast(std::size_t rank, std::span<double> values) {
  if (rank >= world_) throw ShapeError("broadcast: rank out of range");
  CollectiveStats st;
  if (world_ == 1) return st;
  if (rank != 0) {
    const auto in = links_[rank - 1]->receive();
    if (in.size() != values.size()) throw ShapeError("broadcast: length mismatch on rank " + std::to_string(rank));
    std::copy(in.begin(), in.end(), values.begin());
  }
  if (rank + 1 < world_) {
    links_[rank]->send(std::vector<double>(values.begin(), values.end()));
    ++st.messages_sent;
    st.elements_sent += values.size();
  }
  st.phases = world_ - 1;
  return st;
}

CollectiveStats ring_cost_model(std::size_t world_size, std::size_t length) {
  if (world_size == 0) throw ShapeError("ring_cost_model: world size must be >= 1");
  CollectiveStats st;
  if (world_size == 1) return st;
  const std::size_t chunk = (length + world_size - 1) / world_size;
  st.phases = 2 * (world_size - 1);
  st.messages_sent = st.phases;
  st.elements_sent = st.phases * chunk;
  return st;
}

void run_workers(std::size_t world_size, const std::function<void(std::size_t)>& fn,
                 const std::function<void()>& on_failure) {
  if (world_size == 0) throw ShapeError("run_workers: world size must be >= 1");
  if (world_size == 1) {
    fn(0);
    return;
  }
  std::mutex mu;
  std::exception_ptr first;
  bool first_is_abort = false;
  bool failed = false;
  auto body = [&](std::size_t rank) {
    try {
      fn(rank);
    } catch (...) {
      bool call_hook = false;
      {
        std::lock_guard lock(mu);
        bool is_abort = false;
        try {
          throw;
        } catch (const GroupAborted&) {
          is_abort = true;
        } catch (...) {
        }
        if (!first || (first_is_abort && !is_abort)) {
          first = std::current_exception();
          first_is_abort = is_abort;
        }
        call_hook = !failed;
        failed = true;
      }
      if (call_hook && on_failure) on_failure();
    }
  };
  std::vector<std::thread> threads;
  threads.reserve(world_size);
  for (std::size_t r = 0; r < world_size; ++r) threads.emplace_back(body, r);
  for (auto& t : threads) t.join();
  if (first) std::rethrow_exception(first);
}

void parallel_for_shards(std::size_t world_size, std::size_t n, const std::function<void(std::size_t)>& fn) {
  if (world_size == 0) throw ShapeError("parallel_for_shards: world size must be >= 1");
  const std::size_t w = std::min(world_size, std::max<std::size_t>(n, 1));
  std::atomic<bool> stop{false};
  run_workers(
      w,
      [&](std::size_t rank) {
        for (std::size_t i = rank; i < n && !stop.load(); i += w) fn(i);
      },
      [&] { stop = true; });
}

std::vector<GradientVector> ring_allreduce(const std::vector<GradientVector>& grads,
                                           std::vector<CollectiveStats>* stats) {
  if (grads.empty()) throw ShapeError("ring_allreduce: no ranks");
  const std::size_t len = grads[0].values.size();
  for (std::size_t r = 0; r < grads.size(); ++r) {
    if (grads[r].values.size() != len) {
      throw ShapeError("ring_allreduce: rank " + std::to_string(r) + " has " +
                       std::to_string(grads[r].values.size()) + " elements, rank 0 has " + std::to_string(len));
    }
    for (double v : grads[r].values) {
      if (!std::isfinite(v)) throw ShapeError("ring_allreduce: non-finite gradient on rank " + std::to_string(r));
    }
  }
  const std::size_t w = grads.size();
  std::vector<GradientVector> out(grads);
  std::vector<CollectiveStats> st(w);
  Ring ring(w);
  run_workers(
      w,
      [&](std::size_t rank) {
        out[rank].source_rank = rank;
        st[rank] = ring.allreduce_mean(rank, out[rank].values);
      },
      [&] { ring.abort(); });
  if (stats) *stats = std::move(st);
  return out;
}

std::vector<std::vector<double>> broadcast_params(std::size_t world_size,
                                                  const std::vector<std::vector<double>>& params) {
  if (params.size() != world_size) throw ShapeError("broadcast_params: need one buffer per rank");
  std::vector<std::vector<double>> out(params);
  Ring ring(world_size);
  run_workers(
      world_size, [&](std::size_t rank) { ring.broadcast(rank, out[rank]); }, [&] { ring.abort(); });
  return out;
}

WorkerGroup WorkerGroup::make(std::size_t world_size, std::size_t dataset_size, std::uint64_t seed) {
  if (world_size == 0) throw ShapeError("WorkerGroup: world size must be >= 1");
  WorkerGroup g;
  g.world_size = world_size;
  g.seed = seed;
  std::vector<std::size_t> perm(dataset_size);
  for (std::size_t i = 0; i < dataset_size; ++i) perm[i] = i;
  Rng rng(seed);
  rng.shuffle(perm.begin(), perm.end());
  g.shards.resize(world_size);
  for (std::size_t i = 0; i < dataset_size; ++i) g.shards[i % world_size].push_back(perm[i]);
  return g;
}

void WorkerGroup::validate(std::size_t dataset_size) const {
  if (world_size == 0 || shards.size() != world_size) throw ShapeError("WorkerGroup: shard count != world size");
  std::vector<bool> seen(dataset_size, false);
  std::size_t total = 0;
  for (const auto& s : shards) {
    for (std::size_t i : s) {
      if (i >= dataset_size) throw ShapeError("WorkerGroup: shard index out of range");
      if (seen[i]) throw ShapeError("WorkerGroup: shards overlap at item " + std::to_string(i));
      seen[i] = true;
      ++total;
    }
  }
  if (total != dataset_size) throw ShapeError("WorkerGroup: shards do not cover the dataset");
}

std::vector<std::size_t> shard_batch(const WorkerGroup& group, std::size_t rank, std::size_t step,
                                     std::size_t batch) {
  const auto& shard = group.shards.at(rank);
  if (shard.empty()) throw ShapeError("shard_batch: rank " + std::to_string(rank) + " has an empty shard");
  std::vector<std::size_t> out(batch);
  for (std::size_t i = 0; i < batch; ++i) out[i] = shard[(step * batch + i) % shard.size()];
  return out;
}

namespace {

// Depends on the step only; objectives derive per-sample noise from it, so
// a sample draws the same dropout mask whichever rank processes it.
std::uint64_t noise_seed(std::uint64_t seed, std::size_t step) { return Rng::derive(seed, step).next_u64(); }

void sgd_update(std::vector<double>& params, std::vector<double>& velocity, std::span<const double> grad,
                const SgdConfig& cfg) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    velocity[i] = cfg.momentum * velocity[i] + grad[i];
    params[i] -= cfg.learning_rate * velocity[i];
  }
}

void check_config(const WorkerGroup& group, const Objective& objective, const std::vector<double>& initial,
                  const SgdConfig& cfg) {
  if (initial.size() != objective.parameter_count()) throw ShapeError("train: parameter count mismatch");
  if (cfg.batch_per_worker == 0) throw ShapeError("train: batch size must be >= 1");
  if (group.shards.size() != group.world_size) throw ShapeError("train: group has no shards");
}

}  // namespace

TrainTrace distributed_train(const WorkerGroup& group, const Objective& objective, std::vector<double> initial,
                             const SgdConfig& cfg) {
  check_config(group, objective, initial, cfg);
  const std::size_t w = group.world_size;
  const std::size_t p = initial.size();
  Ring ring(w);
  std::vector<std::vector<double>> replicas(w, std::vector<double>(p, 0.0));
  replicas[0] = std::move(initial);
  TrainTrace trace;
  trace.step_loss.resize(cfg.steps);
  trace.replica_checksums.resize(w);

  run_workers(
      w,
      [&](std::size_t rank) {
        std::vector<double>& params = replicas[rank];
        ring.broadcast(rank, params);
        std::vector<double> velocity(p, 0.0);
        std::vector<double> buf(p + 1);
        for (std::size_t step = 0; step < cfg.steps; ++step) {
          const auto batch = shard_batch(group, rank, step, cfg.batch_per_worker);
          buf[p] = objective.loss_and_gradient(params, batch, noise_seed(cfg.seed, step),
                                               std::span<double>(buf).first(p));
          ring.allreduce_mean(rank, buf);
          if (!std::isfinite(buf[p])) {
            throw TrainingDiverged("distributed_train: non-finite loss at step " + std::to_string(step + 1),
                                   step + 1);
          }
          if (rank == 0) {
            trace.step_loss[step] = buf[p];
            if (step == 0) trace.first_step_gradient.assign(buf.begin(), buf.begin() + static_cast<std::ptrdiff_t>(p));
          }
          sgd_update(params, velocity, std::span<const double>(buf).first(p), cfg);
        }
        trace.replica_checksums[rank] = checksum(params);
      },
      [&] { ring.abort(); });
  trace.params = std::move(replicas[0]);
  return trace;
}

TrainTrace single_process_train(const WorkerGroup& group, const Objective& objective, std::vector<double> initial,
                                const SgdConfig& cfg) {
  check_config(group, objective, initial, cfg);
  const std::size_t p = initial.size();
  TrainTrace trace;
  trace.params = std::move(initial);
  std::vector<double> velocity(p, 0.0);
  std::vector<double> grad(p);
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    std::vector<std::size_t> batch;
    for (std::size_t r = 0; r < group.world_size; ++r) {
      const auto b = shard_batch(group, r, step, cfg.batch_per_worker);
      batch.insert(batch.end(), b.begin(), b.end());
    }
    const double loss = objective.loss_and_gradient(trace.params, batch, noise_seed(cfg.seed, step), grad);
    if (!std::isfinite(loss)) {
      throw TrainingDiverged("single_process_train: non-finite loss at step " + std::to_string(step + 1), step + 1);
    }
    trace.step_loss.push_back(loss);
    if (step == 0) trace.first_step_gradient = grad;
    sgd_update(trace.params, velocity, grad, cfg);
  }
  trace.replica_checksums = {checksum(trace.params)};
  return trace;
}

ScalingReport speedup_benchmark(const std::function<void(std::size_t)>& workload,
                                const std::vector<std::size_t>& worker_counts, std::string workload_name) {
  if (worker_counts.empty()) throw ShapeError("speedup_benchmark: no worker counts");
  ScalingReport rep;
  rep.workload = std::move(workload_name);
  rep.hardware_threads = std::max(1u, std::thread::hardware_concurrency());
  auto time_it = [&](std::size_t w) {
    const auto t0 = std::chrono::steady_clock::now();
    workload(w);
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  };
  std::set<std::size_t> counts(worker_counts.begin(), worker_counts.end());
  if (counts.count(0)) throw ShapeError("speedup_benchmark: worker count 0");
  const double t1 = time_it(1);
  for (std::size_t w : counts) {
    ScalingRow row;
    row.workers = w;
    row.sequential_seconds = t1;
    row.parallel_seconds = w == 1 ? t1 : time_it(w);
    row.speedup = w == 1 ? 1.0 : t1 / row.parallel_seconds;
    if (w > rep.hardware_threads) rep.under_provisioned = true;
    rep.rows.push_back(row);
  }
  return rep;
}

std::string format_scaling_table(const ScalingReport& report) {
  std::ostringstream out;
  out << "# workload " << report.workload << "\n# hardware_threads " << report.hardware_threads << "\n";
  if (report.under_provisioned) out << "# WARNING under-provisioned: some W exceed hardware threads\n";
  out << std::left << std::setw(6) << "W" << std::setw(14) << "T_p(s)" << std::setw(14) << "T_s(s)" << "S\n";
  out << std::fixed;
  for (const auto& r : report.rows) {
    out << std::setw(6) << r.workers << std::setw(14) << std::setprecision(4) << r.parallel_seconds << std::setw(14)
        << r.sequential_seconds << std::setprecision(3) << r.speedup << '\n';
  }
  out << "# reference (published, 8-GPU server, not reproduced here): W=2 S=1.93; W=8 S=5.09\n";
  return out.str();
}

}  // namespace nstaug
