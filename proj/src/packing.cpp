#include "blockdiff/packing.hpp"

#include <stdexcept>
#include <string>

namespace blockdiff {

std::vector<std::uint8_t> PackedBuffer::trainable(Token bos) const {
  std::vector<std::uint8_t> f(tokens.size(), 0);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    f[i] = segments[i] >= 0 && !(i == 0 && bos >= 0 && tokens[0] == bos);
  }
  return f;
}

int PackedBuffer::real_tokens() const {
  int n = 0;
  for (int s : segments) n += s >= 0;
  return n;
}

void PackingConfig::validate() const {
  if (context_len < 2) throw std::invalid_argument("packing: context_len must be >= 2");
  if (eos_min < 0 || eos_max < eos_min) throw std::invalid_argument("packing: need 0 <= eos_min <= eos_max");
}

std::vector<PackedBuffer> pack_sequences(const std::vector<TokenSeq>& corpus, const PackingConfig& cfg, Rng& rng) {
  cfg.validate();
  const int header = cfg.bos >= 0 ? 1 : 0;
  const int room = cfg.context_len - header;
  std::vector<PackedBuffer> out;
  PackedBuffer cur;
  int next_segment = 0;

  auto open = [&] {
    cur = PackedBuffer{};
    next_segment = 0;
    if (header) {
      cur.tokens.push_back(cfg.bos);
      cur.segments.push_back(0);
    }
  };
  auto close = [&] {
    cur.segments.resize(static_cast<std::size_t>(cfg.context_len), -1);
    cur.tokens.resize(static_cast<std::size_t>(cfg.context_len), cfg.pad);
    out.push_back(std::move(cur));
  };

  open();
  for (std::size_t idx = 0; idx < corpus.size(); ++idx) {
    const TokenSeq& s = corpus[idx];
    if (static_cast<int>(s.size()) >= room) {
      throw std::invalid_argument("pack_sequences: sample " + std::to_string(idx) + " has length " +
                                  std::to_string(s.size()) + ", buffer holds " + std::to_string(room) +
                                  " tokens after BOS and at least one eos");
    }
    const int k = static_cast<int>(rng.uniform_int(cfg.eos_min, cfg.eos_max));
    const int unit = static_cast<int>(s.size()) + k;
    const int used = static_cast<int>(cur.tokens.size());
    if (used + unit > cfg.context_len && used > header) {
      close();
      open();
    }
    const int seg = next_segment++;
    cur.eos_runs.push_back(k);
    for (Token t : s) {
      cur.tokens.push_back(t);
      cur.segments.push_back(seg);
    }
    for (int e = 0; e < k && static_cast<int>(cur.tokens.size()) < cfg.context_len; ++e) {
      cur.tokens.push_back(cfg.eos);
      cur.segments.push_back(seg);
    }
  }
  if (static_cast<int>(cur.tokens.size()) > header) close();
  return out;
}

}  // namespace blockdiff
