#include "waver/packing.hpp"

#include <algorithm>
#include <istream>
#include <map>
#include <numeric>
#include <ostream>
#include <sstream>

#include "waver/error.hpp"

namespace waver {

namespace {

void check_lengths(const std::vector<int>& lengths, int max_tokens) {
    WAVER_REQUIRE(max_tokens > 0, ContractError, "max_tokens must be positive");
    for (std::size_t i = 0; i < lengths.size(); ++i) {
        WAVER_REQUIRE(lengths[i] > 0, ContractError, "sample " + std::to_string(i) + " has non-positive length");
        WAVER_REQUIRE(lengths[i] <= max_tokens, ContractError,
                      "sample " + std::to_string(i) + " has length " + std::to_string(lengths[i]) +
                          " > max_tokens " + std::to_string(max_tokens));
    }
}

struct Strategy {
    std::size_t count;
    std::vector<int> pack;
};

}  // namespace

double PackPlan::efficiency() const {
    if (bins.empty()) return 0.0;
    const double used = std::accumulate(totals.begin(), totals.end(), 0.0);
    return used / (double(bins.size()) * max_tokens);
}

void PackPlan::validate(const std::vector<int>& lengths) const {
    WAVER_REQUIRE(totals.size() == bins.size(), ContractError, "pack plan totals and bins differ in size");
    std::vector<int> seen(lengths.size(), 0);
    for (std::size_t b = 0; b < bins.size(); ++b) {
        int total = 0;
        for (auto id : bins[b]) {
            WAVER_REQUIRE(id < lengths.size(), ContractError, "pack plan references unknown sample " + std::to_string(id));
            ++seen[id];
            total += lengths[id];
        }
        WAVER_REQUIRE(total == totals[b], ContractError, "bin " + std::to_string(b) + " total is wrong");
        WAVER_REQUIRE(total <= max_tokens, ContractError, "bin " + std::to_string(b) + " overflows");
    }
    for (std::size_t i = 0; i < seen.size(); ++i)
        WAVER_REQUIRE(seen[i] == 1, ContractError,
                      "sample " + std::to_string(i) + " appears " + std::to_string(seen[i]) + " times");
}

PackPlan spfhp_pack(const std::vector<int>& lengths, int max_tokens, int max_per_bin) {
    check_lengths(lengths, max_tokens);
    WAVER_REQUIRE(max_per_bin >= 1, ContractError, "max_per_bin must be >= 1");
    std::vector<std::size_t> histogram(std::size_t(max_tokens) + 1, 0);
    for (int l : lengths) ++histogram[std::size_t(l)];

    // Keyed by remaining space. Open strategies may still grow; final ones are full.
    std::map<int, std::vector<Strategy>> open;
    std::vector<Strategy> closed;
    auto add_pack = [&](std::vector<int> pack, std::size_t count, int space) {
        if (int(pack.size()) == max_per_bin || space == 0) closed.push_back({count, std::move(pack)});
        else open[space].push_back({count, std::move(pack)});
    };

    for (int length = max_tokens; length >= 1; --length) {
        std::size_t remaining = histogram[std::size_t(length)];
        int offset = max_tokens - length + 1;
        while (remaining > 0) {
            const auto it = open.find(length + offset);
            if (it != open.end()) {
                Strategy s = std::move(it->second.back());
                it->second.pop_back();
                std::vector<int> grown = s.pack;
                grown.push_back(length);
                const std::size_t count = std::min(s.count, remaining);
                if (s.count > remaining) {
                    s.count -= remaining;
                    it->second.push_back(std::move(s));
                    remaining = 0;
                } else {
                    remaining -= s.count;
                }
                if (it->second.empty()) open.erase(it);
                add_pack(std::move(grown), count, offset);
            } else {
                --offset;
            }
            if (offset < 0) {
                add_pack({length}, remaining, max_tokens - length);
                remaining = 0;
            }
        }
    }
    for (auto& [space, list] : open)
        for (auto& s : list) closed.push_back(std::move(s));

    std::vector<std::vector<std::size_t>> by_length(std::size_t(max_tokens) + 1);
    for (std::size_t i = lengths.size(); i-- > 0;) by_length[std::size_t(lengths[i])].push_back(i);
    PackPlan plan;
    plan.max_tokens = max_tokens;
    for (const auto& s : closed)
        for (std::size_t c = 0; c < s.count; ++c) {
            std::vector<std::size_t> bin;
            int total = 0;
            for (int l : s.pack) {
                bin.push_back(by_length[std::size_t(l)].back());
                by_length[std::size_t(l)].pop_back();
                total += l;
            }
            plan.bins.push_back(std::move(bin));
            plan.totals.push_back(total);
        }
    return plan;
}

PackPlan first_fit_decreasing(const std::vector<int>& lengths, int max_tokens, int max_per_bin) {
    check_lengths(lengths, max_tokens);
    std::vector<std::size_t> order(lengths.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return lengths[a] > lengths[b]; });
    PackPlan plan;
    plan.max_tokens = max_tokens;
    for (auto id : order) {
        std::size_t b = 0;
        while (b < plan.bins.size() &&
               (plan.totals[b] + lengths[id] > max_tokens || int(plan.bins[b].size()) >= max_per_bin))
            ++b;
        if (b == plan.bins.size()) {
            plan.bins.emplace_back();
            plan.totals.push_back(0);
        }
        plan.bins[b].push_back(id);
        plan.totals[b] += lengths[id];
    }
    return plan;
}

PackPlan one_per_bin(const std::vector<int>& lengths, int max_tokens) {
    check_lengths(lengths, max_tokens);
    PackPlan plan;
    plan.max_tokens = max_tokens;
    for (std::size_t i = 0; i < lengths.size(); ++i) {
        plan.bins.push_back({i});
        plan.totals.push_back(lengths[i]);
    }
    return plan;
}

std::size_t bin_lower_bound(const std::vector<int>& lengths, int max_tokens) {
    const long total = std::accumulate(lengths.begin(), lengths.end(), 0L);
    return std::size_t((total + max_tokens - 1) / max_tokens);
}

void write_pack_plan(std::ostream& os, const PackPlan& plan) {
    os << "max_tokens " << plan.max_tokens << "\n";
    for (std::size_t b = 0; b < plan.bins.size(); ++b) {
        os << plan.totals[b];
        for (auto id : plan.bins[b]) os << ' ' << id;
        os << "\n";
    }
}

PackPlan read_pack_plan(std::istream& is) {
    PackPlan plan;
    std::string line, key;
    WAVER_REQUIRE(std::getline(is, line), IoError, "empty pack plan");
    std::istringstream head(line);
    WAVER_REQUIRE((head >> key >> plan.max_tokens) && key == "max_tokens", IoError, "bad pack plan header: " + line);
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        int total;
        WAVER_REQUIRE(static_cast<bool>(ls >> total), IoError, "bad pack plan line: " + line);
        std::vector<std::size_t> bin;
        std::size_t id;
        while (ls >> id) bin.push_back(id);
        WAVER_REQUIRE(ls.eof() && !bin.empty(), IoError, "bad pack plan line: " + line);
        plan.bins.push_back(std::move(bin));
        plan.totals.push_back(total);
    }
    return plan;
}

std::vector<int> pack_groups(const std::vector<int>& lengths) {
    std::vector<int> g;
    for (std::size_t k = 0; k < lengths.size(); ++k) g.insert(g.end(), std::size_t(lengths[k]), int(k));
    return g;
}

BlockMask attention_mask_for_pack(const std::vector<int>& lengths) {
    const auto g = pack_groups(lengths);
    BlockMask m;
    m.n = g.size();
    m.allowed.assign(m.n * m.n, false);
    for (std::size_t i = 0; i < m.n; ++i)
        for (std::size_t j = 0; j < m.n; ++j) m.allowed[i * m.n + j] = g[i] == g[j];
    return m;
}

std::size_t bucket_of(int total, const std::vector<int>& edges) {
    WAVER_REQUIRE(!edges.empty() && std::is_sorted(edges.begin(), edges.end()), ContractError,
                  "bucket edges must be non-empty and sorted");
    const auto it = std::lower_bound(edges.begin(), edges.end(), total);
    WAVER_REQUIRE(it != edges.end(), ContractError,
                  "pack total " + std::to_string(total) + " exceeds the last bucket edge " + std::to_string(edges.back()));
    return std::size_t(it - edges.begin());
}

std::vector<Batch> bucket_batches(const PackPlan& plan, const std::vector<int>& edges, int batch_size, Rng& rng) {
    WAVER_REQUIRE(batch_size >= 1, ContractError, "batch_size must be >= 1");
    std::vector<std::vector<std::size_t>> buckets(edges.size());
    for (std::size_t b = 0; b < plan.bins.size(); ++b) buckets[bucket_of(plan.totals[b], edges)].push_back(b);
    std::vector<Batch> batches;
    for (std::size_t k = 0; k < buckets.size(); ++k) {
        auto& ids = buckets[k];
        for (std::size_t i = ids.size(); i > 1; --i) std::swap(ids[i - 1], ids[rng.below(i)]);
        for (std::size_t s = 0; s < ids.size(); s += std::size_t(batch_size)) {
            Batch batch;
            batch.bucket_length = edges[k];
            for (std::size_t i = s; i < std::min(ids.size(), s + std::size_t(batch_size)); ++i) {
                batch.bins.push_back(ids[i]);
                batch.pad_tokens += std::size_t(edges[k] - plan.totals[ids[i]]);
            }
            batches.push_back(std::move(batch));
        }
    }
    for (std::size_t i = batches.size(); i > 1; --i) std::swap(batches[i - 1], batches[rng.below(i)]);
    return batches;
}

}  // namespace waver
