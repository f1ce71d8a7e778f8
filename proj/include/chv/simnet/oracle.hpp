#pragma once

#include <map>
#include <set>

#include "chv/kvstore.hpp"
#include "chv/simnet/trace.hpp"

namespace chv::sim {

struct OracleResult {
  KvMap final_state;
  std::map<MachineId, KvMap> per_client;  // state at each client's newest received seq
  std::map<std::string, MachineId> arbitrators;
};

// Replays the server's untruncated accept history (queue 0). Needs recorded ciphertexts.
inline OracleResult oracle_replay(const Trace& tr) {
  std::map<Digest, const SealedEvent*> sealed;
  for (const auto& e : tr.events)
    if (auto* s = std::get_if<SealedEvent>(&e)) sealed[s->hmac_cur] = s;

  std::map<SeqNo, Digest> chain;  // later stores at a seq replace earlier ones
  for (const auto& e : tr.events)
    if (auto* a = std::get_if<ServerAcceptEvent>(&e); a && a->queue == 0) chain[a->seq] = a->hmac_cur;

  ChainConfig cc;
  cc.block_size = tr.header.block_size;
  std::vector<std::pair<SeqNo, KvMap>> states;
  KvMap kv;
  std::set<TxId> applied;
  std::map<std::string, std::pair<SeqNo, MachineId>> origin;
  for (const auto& [seq, h] : chain) {
    auto it = sealed.find(h);
    if (it == sealed.end() || it->second->cipher.empty())
      throw std::runtime_error("trace lacks the ciphertext of seq " + std::to_string(seq));
    SealedMessage m{seq, it->second->nonce, it->second->cipher};
    for (const auto& r : open(m, tr.header.keys, cc).records) {
      if (auto* c = std::get_if<Commit>(&r)) {
        if (!applied.insert(c->id).second) continue;
        for (const auto& w : c->writes) kv[w.key] = w.value;
      } else if (auto* k = std::get_if<NewKey>(&r)) {
        auto o = origin.find(k->key);
        if (o == origin.end() || k->origin_seq < o->second.first)
          origin[k->key] = {k->origin_seq, k->arbitrator};
      }
    }
    states.emplace_back(seq, kv);
  }

  OracleResult out;
  out.final_state = kv;
  for (const auto& [k, v] : origin) out.arbitrators[k] = v.second;
  std::map<MachineId, SeqNo> newest;
  for (const auto& e : tr.events)
    if (auto* a = std::get_if<AcceptEvent>(&e)) newest[a->client] = std::max(newest[a->client], a->seq);
  for (const auto& [c, s] : newest) {
    KvMap at;
    for (const auto& [seq, st] : states) {
      if (seq > s) break;
      at = st;
    }
    out.per_client[c] = at;
  }
  return out;
}

}  // namespace chv::sim
