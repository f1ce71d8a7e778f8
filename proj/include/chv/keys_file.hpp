#pragma once

#include <cctype>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>

#include "chv/envelope.hpp"

namespace chv {

struct KeyFileError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Two lines of 64 hex digits: auth key, then encryption key. Surrounding whitespace and a
// trailing newline are ignored.
inline SecretKeys parse_keys(const std::string& text) {
  std::istringstream in(text);
  std::string lines[2];
  for (auto& l : lines) {
    if (!std::getline(in, l)) throw KeyFileError("keys file needs two lines");
    while (!l.empty() && std::isspace(static_cast<unsigned char>(l.back()))) l.pop_back();
    while (!l.empty() && std::isspace(static_cast<unsigned char>(l.front()))) l.erase(l.begin());
    if (l.size() != 64) throw KeyFileError("key line must be 64 hex digits, got " + std::to_string(l.size()));
  }
  std::string rest, extra;
  while (std::getline(in, extra)) rest += extra;
  if (rest.find_first_not_of(" \t\r\n") != std::string::npos) throw KeyFileError("trailing data in keys file");
  try {
    return {fixed_from_hex<32>(lines[0]), fixed_from_hex<32>(lines[1])};
  } catch (const DecodeError& e) {
    throw KeyFileError(e.what());
  }
}

inline SecretKeys load_keys_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw KeyFileError("cannot read keys file " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_keys(ss.str());
}

inline std::string format_keys(const SecretKeys& k) {
  return to_hex(ByteSpan(k.auth_key)) + "\n" + to_hex(ByteSpan(k.enc_key)) + "\n";
}

}  // namespace chv
