// chv: relay daemon, key-value client, simulator runner and trace checker.

#include <CLI11.hpp>
#include <csignal>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "chv/keys_file.hpp"
#include "chv/netd/daemon.hpp"
#include "chv/netd/tcp_transport.hpp"
#include "chv/replica.hpp"
#include "chv/simnet/checker.hpp"
#include "chv/simnet/sim.hpp"

namespace {

using namespace chv;

enum Exit : int {
  kOk = 0,
  kFailure = 1,
  kDetection = 2,
  kInconsistent = 3,
  kUsage = 64,
  kDataError = 65,
};

struct ExitWith {
  int code;
  std::string message;
};

void setup_logging() {
  auto logger = spdlog::stderr_color_mt("chv");
  spdlog::set_default_logger(logger);
  spdlog::set_level(spdlog::level::warn);
  if (const char* lvl = std::getenv("CHV_LOG")) spdlog::set_level(spdlog::level::from_str(lvl));
}

std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ExitWith{kDataError, "cannot read " + path};
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------- serve

int cmd_serve(const netd::DaemonConfig& cfg) {
  sigset_t set;
  sigemptyset(&set);
  sigaddset(&set, SIGINT);
  sigaddset(&set, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &set, nullptr);  // worker threads inherit the mask
  netd::Daemon d(cfg);
  try {
    d.start();
  } catch (const std::exception& e) {
    throw ExitWith{kFailure, e.what()};
  }
  std::cout << "listening on " << cfg.host << ":" << d.port() << std::endl;
  int sig = 0;
  sigwait(&set, &sig);
  spdlog::info("signal {}, shutting down", sig);
  d.stop();
  return kOk;
}

// ---------------------------------------------------------------- kv

struct KvArgs {
  std::string op;
  std::string key;
  std::string value;
  std::string server;
  std::string keys_file;
  std::string state_file;
  MachineId machine_id = 0;
  std::vector<MachineId> members;
  MachineId arbitrator = 0;
  std::uint64_t capacity = 8;
  std::size_t block_size = 1024;
  unsigned wait_rounds = 4;
};

std::pair<std::string, std::uint16_t> split_host_port(const std::string& s) {
  auto colon = s.rfind(':');
  if (colon == std::string::npos || colon == 0) throw ExitWith{kUsage, "--server must be HOST:PORT"};
  try {
    auto port = std::stoul(s.substr(colon + 1));
    if (port == 0 || port > 65535) throw std::out_of_range("port");
    return {s.substr(0, colon), static_cast<std::uint16_t>(port)};
  } catch (const std::logic_error&) {
    throw ExitWith{kUsage, "bad port in --server " + s};
  }
}

// State file: JSON with the membership the replica was created with and its snapshot.
struct KvState {
  ClientConfig cfg;
  std::optional<Replica> replica;
};

KvState load_state(const KvArgs& a, const SecretKeys& keys) {
  KvState st;
  st.cfg.machine_id = a.machine_id;
  st.cfg.keys = keys;
  st.cfg.chain.block_size = a.block_size;
  st.cfg.initial_capacity = a.capacity;
  st.cfg.known_clients = a.members;
  if (std::find(a.members.begin(), a.members.end(), a.machine_id) == a.members.end())
    st.cfg.known_clients.push_back(a.machine_id);
  std::sort(st.cfg.known_clients.begin(), st.cfg.known_clients.end());

  if (!std::filesystem::exists(a.state_file)) {
    st.replica.emplace(st.cfg);
    return st;
  }
  try {
    auto j = nlohmann::json::parse(read_file(a.state_file));
    if (j.at("machine_id").get<MachineId>() != a.machine_id)
      throw ExitWith{kUsage, "state file belongs to machine " + j.at("machine_id").dump()};
    st.cfg.known_clients = j.at("members").get<std::vector<MachineId>>();
    st.cfg.initial_capacity = j.at("capacity").get<std::uint64_t>();
    st.cfg.chain.block_size = j.at("block_size").get<std::size_t>();
    auto blob = from_hex(j.at("replica").get<std::string>());
    st.replica.emplace(Replica::restore(st.cfg, ByteSpan(blob)));
  } catch (const ExitWith&) {
    throw;
  } catch (const std::exception& e) {
    throw ExitWith{kDataError, "unreadable state file " + a.state_file + ": " + e.what()};
  }
  return st;
}

void save_state(const KvArgs& a, const KvState& st) {
  nlohmann::json j = {{"machine_id", a.machine_id},
                      {"members", st.cfg.known_clients},
                      {"capacity", st.cfg.initial_capacity},
                      {"block_size", st.cfg.chain.block_size},
                      {"replica", to_hex(ByteSpan(st.replica->snapshot()))}};
  auto tmp = a.state_file + ".tmp";
  {
    std::ofstream f(tmp, std::ios::trunc);
    f << j.dump() << "\n";
    if (!f) throw ExitWith{kFailure, "cannot write " + tmp};
  }
  std::filesystem::rename(tmp, a.state_file);
}

void sync_or_exit(Replica& r, Transport& t) {
  auto rep = r.sync(t);
  if (auto d = r.client().detection())
    throw ExitWith{kDetection, std::string("DETECTION ") + to_string(d->kind) + " at seq " +
                                   std::to_string(d->at_seq) + ": " + d->details};
  if (rep.fetch.network_failure) throw ExitWith{kFailure, "server unreachable"};
}

int cmd_kv(const KvArgs& a) {
  SecretKeys keys;
  try {
    keys = load_keys_file(a.keys_file);
  } catch (const KeyFileError& e) {
    throw ExitWith{kDataError, e.what()};
  }
  auto [host, port] = split_host_port(a.server);
  KvState st = load_state(a, keys);
  Replica& r = *st.replica;
  netd::TcpTransport t(host, port, st.cfg.chain.block_size);

  int rc = kOk;
  try {
    sync_or_exit(r, t);
    if (a.op == "get") {
      if (auto v = r.get_committed(a.key)) {
        std::cout << *v << "\n";
      } else {
        std::cerr << "no committed value for " << a.key << "\n";
        rc = kFailure;
      }
    } else {
      if (!r.kv().arbitrator_of(a.key)) {
        MachineId arb = a.arbitrator ? a.arbitrator : a.machine_id;
        r.create_key(a.key, arb);
        spdlog::info("creating key {} with arbitrator {}", a.key, arb);
      }
      auto h = r.start_transaction();
      r.put(h, a.key, a.value);
      r.submit(h);
      sync_or_exit(r, t);
      for (unsigned i = 0; i < a.wait_rounds && r.status(h) == TxStatus::Pending; ++i) sync_or_exit(r, t);
      auto s = r.status(h);
      std::cout << to_string(s) << "\n";
      if (s == TxStatus::Aborted || s == TxStatus::Deferred) rc = kFailure;
    }
  } catch (const ExitWith& e) {
    save_state(a, st);  // keep the chain state, including a detection, for the next run
    throw;
  } catch (const std::exception& e) {
    save_state(a, st);
    throw ExitWith{kFailure, e.what()};
  }
  save_state(a, st);
  return rc;
}

// ---------------------------------------------------------------- scenario / trace

int report_verdict(const sim::Verdict& v) {
  std::cout << "verdict: " << sim::to_string(v.kind);
  if (v.fork_flag) std::cout << " (fork flag)";
  std::cout << "\n";
  for (const auto& d : v.detections)
    std::cout << "detection: " << to_string(d.kind) << " at seq " << d.at_seq << ": " << d.details << "\n";
  if (v.witness)
    std::cout << "witness: client " << v.witness->client << " horizon " << v.witness->horizon << " seq "
              << v.witness->seq_a << " vs " << v.witness->seq_b << ": " << v.witness->reason << "\n";
  switch (v.kind) {
    case sim::Verdict::Kind::Inconsistent: return kInconsistent;
    case sim::Verdict::Kind::DetectedViolation: return kDetection;
    default: return kOk;
  }
}

int cmd_scenario(const std::string& file, std::optional<std::uint64_t> seed, const std::string& trace_out) {
  sim::SimConfig cfg;
  try {
    cfg = sim::config_from_json(nlohmann::json::parse(read_file(file)));
  } catch (const sim::ConfigError& e) {
    throw ExitWith{kDataError, e.what()};
  } catch (const nlohmann::json::exception& e) {
    throw ExitWith{kDataError, std::string("malformed scenario: ") + e.what()};
  }
  if (seed) cfg.seed = *seed;
  sim::Simulator s(cfg);
  const auto& tr = s.run();
  if (!trace_out.empty()) {
    std::ofstream f(trace_out, std::ios::trunc);
    sim::write_jsonl(f, tr);
    if (!f) throw ExitWith{kFailure, "cannot write " + trace_out};
  }
  std::cout << "scenario: " << file << " seed " << cfg.seed << " adversary " << tr.header.adversary << "\n"
            << "clients: " << cfg.num_clients << " messages stored: " << tr.count<sim::ServerAcceptEvent>()
            << " detections: " << tr.detections() << "\n";
  return report_verdict(sim::check_fork_consistency(tr));
}

int cmd_trace_check(const std::string& file) {
  std::ifstream f(file);
  if (!f) throw ExitWith{kDataError, "cannot read " + file};
  sim::Trace tr;
  try {
    tr = sim::read_jsonl(f);
  } catch (const std::exception& e) {
    throw ExitWith{kDataError, std::string("malformed trace: ") + e.what()};
  }
  return report_verdict(sim::check_fork_consistency(tr));
}

}  // namespace

int main(int argc, char** argv) {
  setup_logging();
  CLI::App app{"chv: relay daemon, key-value client and chain simulator"};
  app.require_subcommand(1);

  netd::DaemonConfig serve_cfg;
  auto* serve = app.add_subcommand("serve", "run the relay daemon");
  serve->add_option("--port", serve_cfg.port, "TCP port (0 picks one)")->required();
  serve->add_option("--capacity", serve_cfg.capacity, "initial queue capacity")->check(CLI::PositiveNumber);
  serve->add_option("--block-size", serve_cfg.block_size, "sealed block size")
      ->check(CLI::Range(kMinBlockSize, std::size_t{1} << 20));
  serve->add_option("--host", serve_cfg.host, "bind address");

  KvArgs kv;
  auto* kvc = app.add_subcommand("kv", "read or write through a daemon");
  kvc->require_subcommand(1);
  for (const char* op : {"put", "get"}) {
    auto* sc = kvc->add_subcommand(op, std::string(op) + " a key");
    sc->callback([&kv, op] { kv.op = op; });
    sc->add_option("--key", kv.key)->required();
    if (std::string(op) == "put") {
      sc->add_option("--value", kv.value)->required();
      sc->add_option("--arbitrator", kv.arbitrator, "arbitrator when the key is new (default: self)");
      sc->add_option("--wait", kv.wait_rounds, "extra syncs while the commit is pending");
    }
    sc->add_option("--server", kv.server, "HOST:PORT")->required();
    sc->add_option("--keys", kv.keys_file, "file with the two hex keys")->required();
    sc->add_option("--machine-id", kv.machine_id)->required()->check(CLI::PositiveNumber);
    sc->add_option("--state", kv.state_file, "client state file")->required();
    sc->add_option("--members", kv.members, "machine ids of all clients (first use only)")->delimiter(',');
    sc->add_option("--capacity", kv.capacity, "initial queue capacity (first use only)");
    sc->add_option("--block-size", kv.block_size, "sealed block size (first use only)");
  }

  std::string scenario_file, trace_out;
  std::optional<std::uint64_t> seed;
  auto* scen = app.add_subcommand("scenario", "simulator scenarios");
  scen->require_subcommand(1);
  auto* run = scen->add_subcommand("run", "run a scenario file");
  run->add_option("file", scenario_file)->required();
  run->add_option("--seed", seed);
  run->add_option("--trace", trace_out, "write the JSONL trace here");

  std::string trace_file;
  auto* trace = app.add_subcommand("trace", "trace tools");
  trace->require_subcommand(1);
  auto* check = trace->add_subcommand("check", "run the fork-consistency checker on a trace");
  check->add_option("file", trace_file)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? 0 : kUsage;
  }

  try {
    if (*serve) return cmd_serve(serve_cfg);
    if (*kvc) return cmd_kv(kv);
    if (*run) return cmd_scenario(scenario_file, seed, trace_out);
    if (*check) return cmd_trace_check(trace_file);
  } catch (const ExitWith& e) {
    std::cerr << e.message << "\n";
    return e.code;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
  return kUsage;
}
