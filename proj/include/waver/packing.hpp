#pragma once

// Sequence packing (shortest-pack-first histogram packing) and bucketed
// batching of packs so that every batch shares one padded token length.

#include <condition_variable>
#include <cstddef>
#include <deque>
#include <functional>
#include <iosfwd>
#include <mutex>
#include <optional>
#include <thread>
#include <vector>

#include "waver/rng.hpp"

namespace waver {

struct PackPlan {
    std::vector<std::vector<std::size_t>> bins;  // sample ids per bin
    std::vector<int> totals;                     // token total per bin
    int max_tokens = 0;

    std::size_t size() const { return bins.size(); }
    double efficiency() const;  // sum of totals / (bins * max_tokens)
    // Throws ContractError unless every id in [0, n) appears in exactly one
    // bin, totals match lengths and no bin overflows.
    void validate(const std::vector<int>& lengths) const;
};

PackPlan spfhp_pack(const std::vector<int>& lengths, int max_tokens, int max_per_bin = 4);
PackPlan first_fit_decreasing(const std::vector<int>& lengths, int max_tokens, int max_per_bin = 4);
PackPlan one_per_bin(const std::vector<int>& lengths, int max_tokens);
std::size_t bin_lower_bound(const std::vector<int>& lengths, int max_tokens);

void write_pack_plan(std::ostream& os, const PackPlan& plan);
PackPlan read_pack_plan(std::istream& is);

// ---- masks ------------------------------------------------------------------

// Group id per packed token: sample k's span gets id k.
std::vector<int> pack_groups(const std::vector<int>& lengths);

struct BlockMask {
    std::size_t n = 0;
    std::vector<bool> allowed;  // row-major n x n
    bool at(std::size_t i, std::size_t j) const { return allowed[i * n + j]; }
};
BlockMask attention_mask_for_pack(const std::vector<int>& lengths);

// ---- bucketing --------------------------------------------------------------

struct Batch {
    int bucket_length = 0;            // padded token length shared by the batch
    std::vector<std::size_t> bins;    // indices into PackPlan::bins
    std::size_t pad_tokens = 0;       // loss-masked tokens needed to reach bucket_length
};

// Bucket of a pack total: the smallest edge >= total. Edges must be sorted
// and the last edge must cover every total.
std::size_t bucket_of(int total, const std::vector<int>& edges);

// One epoch: every bin exactly once, batches never mix buckets, order inside
// each bucket shuffled by rng, bucket order interleaved by rng as well.
std::vector<Batch> bucket_batches(const PackPlan& plan, const std::vector<int>& edges, int batch_size, Rng& rng);

// Background producer running up to `depth` items ahead of the consumer. The
// producer returns nullopt when exhausted; next() yields items in production
// order and nullopt at the end.
template <class T>
class Prefetcher {
public:
    Prefetcher(std::function<std::optional<T>()> producer, std::size_t depth)
        : producer_(std::move(producer)), depth_(depth == 0 ? 1 : depth), worker_([this] { run(); }) {}

    ~Prefetcher() {
        {
            std::lock_guard lk(m_);
            stop_ = true;
        }
        cv_.notify_all();
        worker_.join();
    }

    Prefetcher(const Prefetcher&) = delete;
    Prefetcher& operator=(const Prefetcher&) = delete;

    std::optional<T> next() {
        std::unique_lock lk(m_);
        cv_.wait(lk, [this] { return !queue_.empty() || done_; });
        if (queue_.empty()) return std::nullopt;
        T item = std::move(queue_.front());
        queue_.pop_front();
        cv_.notify_all();
        return item;
    }

    std::size_t max_buffered() const {
        std::lock_guard lk(m_);
        return high_water_;
    }

private:
    void run() {
        for (;;) {
            {
                std::unique_lock lk(m_);
                cv_.wait(lk, [this] { return queue_.size() < depth_ || stop_; });
                if (stop_) break;
            }
            auto item = producer_();
            std::lock_guard lk(m_);
            if (!item) {
                done_ = true;
                cv_.notify_all();
                break;
            }
            queue_.push_back(std::move(*item));
            high_water_ = std::max(high_water_, queue_.size());
            cv_.notify_all();
        }
        std::lock_guard lk(m_);
        done_ = true;
        cv_.notify_all();
    }

    std::function<std::optional<T>()> producer_;
    std::size_t depth_;
    mutable std::mutex m_;
    std::condition_variable cv_;
    std::deque<T> queue_;
    std::size_t high_water_ = 0;
    bool done_ = false, stop_ = false;
    std::thread worker_;
};

}  // namespace waver
