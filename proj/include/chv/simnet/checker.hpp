#pragma once

#include <algorithm>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "chv/simnet/trace.hpp"

namespace chv::sim {

struct Witness {
  MachineId client = 0;  // 0 when the pair spans clients
  SeqNo horizon = 0;  // 0 for a single-client witness
  SeqNo seq_a = 0, seq_b = 0;
  Digest a{}, b{};
  std::string reason;
};

struct Verdict {
  enum class Kind { ForkConsistent, DetectedViolation, Inconsistent };
  Kind kind = Kind::ForkConsistent;
  bool fork_flag = false;                 // a long-offline client moved to another branch
  std::vector<Digest> total_sequence;     // ForkConsistent: path of the newest received message
  std::vector<Detection> detections;      // DetectedViolation
  std::optional<Witness> witness;         // Inconsistent
};

inline const char* to_string(Verdict::Kind k) {
  switch (k) {
    case Verdict::Kind::ForkConsistent: return "ForkConsistent";
    case Verdict::Kind::DetectedViolation: return "DetectedViolation";
    case Verdict::Kind::Inconsistent: return "INCONSISTENT";
  }
  return "?";
}

// Fork-consistency check over a trace. Message ancestry comes only from hmac links.
class ForkChecker {
 public:
  explicit ForkChecker(const Trace& tr) {
    for (const auto& e : tr.events) {
      if (auto* s = std::get_if<SealedEvent>(&e)) add_node(s->hmac_cur, s->seq, s->hmac_prev);
      if (auto* a = std::get_if<AcceptEvent>(&e)) add_node(a->hmac_cur, a->seq, a->hmac_prev);
    }
    build_ancestry();
    std::size_t cut = tr.events.size();
    for (std::size_t i = 0; i < tr.events.size(); ++i)
      if (auto* d = std::get_if<DetectEvent>(&tr.events[i])) {
        detections_.push_back(d->detection);
        cut = std::min(cut, i);
      }
    for (std::size_t i = 0; i < cut; ++i)
      if (auto* a = std::get_if<AcceptEvent>(&tr.events[i]))
        receipts_[a->client].push_back({index_.at(a->hmac_cur), a->gap, a->capacity});
  }

  Verdict verdict() {
    Verdict v;
    std::map<MachineId, std::vector<int>> effective;
    for (auto& [client, recs] : receipts_) {
      auto w = client_order(client, recs, v.fork_flag, effective[client]);
      if (w) return inconsistent(std::move(*w));
    }
    if (auto w = horizons(effective)) return inconsistent(std::move(*w));
    if (!detections_.empty()) {
      v.kind = Verdict::Kind::DetectedViolation;
      v.detections = detections_;
      return v;
    }
    int top = -1;
    for (auto& [c, recs] : effective)
      for (int m : recs)
        if (top < 0 || nodes_[m].seq > nodes_[top].seq) top = m;
    for (int m = top; m >= 0; m = nodes_[m].parent) v.total_sequence.push_back(nodes_[m].hmac);
    std::reverse(v.total_sequence.begin(), v.total_sequence.end());
    return v;
  }

  // True iff `a` lies on the path of `b` (a == b counts).
  bool in_path(int a, int b) const { return at_seq(b, nodes_[a].seq) == a; }

 private:
  struct Node {
    Digest hmac{};
    SeqNo seq = 0;
    Digest hmac_prev{};
    int parent = -1;
  };
  struct Receipt {
    int node;
    bool gap;
    std::uint64_t capacity;
  };

  void add_node(const Digest& h, SeqNo seq, const Digest& prev) {
    if (index_.count(h)) return;
    index_[h] = static_cast<int>(nodes_.size());
    nodes_.push_back({h, seq, prev, -1});
  }

  void build_ancestry() {
    for (auto& n : nodes_) {
      auto it = index_.find(n.hmac_prev);
      if (it != index_.end() && n.hmac_prev != Digest{}) n.parent = it->second;
    }
    const std::size_t n = nodes_.size();
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) { return nodes_[a].seq < nodes_[b].seq; });
    // a chain link always advances seq by one
    paths_.assign(n, {});
    for (int i : order) {
      int p = nodes_[i].parent;
      if (p >= 0 && nodes_[p].seq + 1 == nodes_[i].seq) paths_[i] = paths_[p];
      paths_[i].insert(paths_[i].begin(), i);
    }
  }

  Witness witness(MachineId c, SeqNo h, int a, int b, std::string why) const {
    return {c, h, nodes_[a].seq, nodes_[b].seq, nodes_[a].hmac, nodes_[b].hmac, std::move(why)};
  }

  Verdict inconsistent(Witness w) const {
    Verdict v;
    v.kind = Verdict::Kind::Inconsistent;
    v.witness = std::move(w);
    v.detections = detections_;
    return v;
  }

  // Per client: consecutive received messages (by seq) lie on one path. A gap receipt that
  // jumps at least a full queue onto another branch is allowed and flagged.
  std::optional<Witness> client_order(MachineId c, std::vector<Receipt> recs, bool& flag,
                                std::vector<int>& effective) const {
    std::stable_sort(recs.begin(), recs.end(),
                     [&](const Receipt& x, const Receipt& y) { return nodes_[x.node].seq < nodes_[y.node].seq; });
    std::size_t start = 0;
    for (std::size_t i = 1; i < recs.size(); ++i) {
      int t = recs[i - 1].node, u = recs[i].node;
      if (t == u) continue;
      if (nodes_[t].seq == nodes_[u].seq)
        return witness(c, 0, t, u, "client accepted two messages with one sequence number");
      if (in_path(t, u)) continue;
      if (recs[i].gap && nodes_[u].seq - nodes_[t].seq >= recs[i].capacity) {
        flag = true;
        start = i;
        continue;
      }
      return witness(c, 0, t, u, "consecutive receipts not on one path");
    }
    for (std::size_t i = start; i < recs.size(); ++i) effective.push_back(recs[i].node);
    std::sort(effective.begin(), effective.end());
    effective.erase(std::unique(effective.begin(), effective.end()), effective.end());
    return std::nullopt;
  }

  // Per horizon n: clients linked by a common message above n form a set. The path of any
  // shared message, cut at n, must contain every message at or below n that a member saw.
  std::optional<Witness> horizons(const std::map<MachineId, std::vector<int>>& eff) const {
    std::vector<MachineId> clients;
    SeqNo max_seq = 0;
    for (auto& [c, ms] : eff) {
      clients.push_back(c);
      for (int m : ms) max_seq = std::max(max_seq, nodes_[m].seq);
    }
    const std::size_t k = clients.size();
    // holders of each received message, ordered by seq
    std::map<int, std::vector<std::size_t>> holders;
    for (std::size_t i = 0; i < k; ++i)
      for (int m : eff.at(clients[i])) holders[m].push_back(i);

    for (SeqNo n = 1; n < max_seq; ++n) {
      std::vector<std::size_t> comp(k);
      std::iota(comp.begin(), comp.end(), 0);
      std::function<std::size_t(std::size_t)> find = [&](std::size_t x) {
        return comp[x] == x ? x : comp[x] = find(comp[x]);
      };
      std::vector<std::vector<int>> shared(k);  // by component root
      for (auto& [m, hs] : holders) {
        if (nodes_[m].seq <= n || hs.size() < 2) continue;
        for (std::size_t j = 1; j < hs.size(); ++j) comp[find(hs[j])] = find(hs[0]);
      }
      for (auto& [m, hs] : holders)
        if (nodes_[m].seq > n && hs.size() >= 2) shared[find(hs[0])].push_back(m);
      for (std::size_t root = 0; root < k; ++root) {
        if (shared[root].empty()) continue;
        int u = shared[root].front();
        for (int w : shared[root])
          if (at_seq(w, n) != at_seq(u, n))
            return witness(0, n, w, u, "shared messages disagree below the horizon");
        for (std::size_t i = 0; i < k; ++i) {
          if (find(i) != root) continue;
          for (int p : eff.at(clients[i]))
            if (nodes_[p].seq <= n && at_seq(u, nodes_[p].seq) != p)
              return witness(clients[i], n, p, u, "received message off the shared path");
        }
      }
    }
    return std::nullopt;
  }

  // Ancestor of m at sequence number s, or -1 when the chain is broken before it.
  int at_seq(int m, SeqNo s) const {
    const auto& p = paths_[m];
    SeqNo top = nodes_[m].seq;
    if (s > top || top - s >= p.size()) return -1;
    return p[top - s];
  }

  std::vector<Node> nodes_;
  std::map<Digest, int> index_;
  std::vector<std::vector<int>> paths_;  // paths_[m][d] = ancestor d links above m
  std::map<MachineId, std::vector<Receipt>> receipts_;
  std::vector<Detection> detections_;
};

inline Verdict check_fork_consistency(const Trace& tr) { return ForkChecker(tr).verdict(); }

}  // namespace chv::sim
