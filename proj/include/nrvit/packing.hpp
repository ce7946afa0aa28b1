#pragma once

#include <vector>

#include "nrvit/common.hpp"
#include "nrvit/ingest.hpp"

namespace nrvit {

// One sample's token rows plus the grid coordinates of each row. Positions
// default to full patchify order; patch dropout subsets both together.
template <typename T>
struct TokenSequence {
  PatchGrid grid;
  Mat<T> tokens;
  std::vector<Pos> positions;

  TokenSequence() = default;
  TokenSequence(PatchGrid g, Mat<T> tok)
      : grid(std::move(g)), tokens(std::move(tok)),
        positions(grid_positions(grid)) {}
  TokenSequence(PatchGrid g, Mat<T> tok, std::vector<Pos> pos)
      : grid(std::move(g)), tokens(std::move(tok)), positions(std::move(pos)) {}
};

// Many samples concatenated into one token matrix. Segment k owns rows
// [boundaries[k], boundaries[k+1]); attention never crosses a boundary.
template <typename T>
struct PackedBatch {
  Mat<T> tokens;                 // [L_total, width]
  std::vector<long> boundaries;  // 0 = b0 < b1 < ... < bK = L_total
  std::vector<PatchGrid> grids;  // one per segment
  std::vector<Pos> positions;    // one per token row

  long segments() const { return static_cast<long>(grids.size()); }
  long total_tokens() const { return tokens.rows(); }
  long segment_length(long k) const {
    return boundaries[static_cast<std::size_t>(k) + 1] -
           boundaries[static_cast<std::size_t>(k)];
  }

  void validate() const {
    NRVIT_CHECK(!boundaries.empty() && boundaries.front() == 0,
                "PackedBatch: boundaries must start at 0");
    for (std::size_t i = 0; i + 1 < boundaries.size(); ++i)
      NRVIT_CHECK(boundaries[i] < boundaries[i + 1],
                  "PackedBatch: boundaries must be strictly increasing");
    NRVIT_CHECK(boundaries.back() == tokens.rows(),
                "PackedBatch: boundaries do not cover the token matrix");
    NRVIT_CHECK(boundaries.size() == grids.size() + 1,
                "PackedBatch: segment count mismatch");
    NRVIT_CHECK(static_cast<long>(positions.size()) == tokens.rows(),
                "PackedBatch: one position triple required per token");
  }
};

// Vertical concatenation in input order; boundaries are the prefix sums.
template <typename T>
PackedBatch<T> pack(const std::vector<TokenSequence<T>>& sequences) {
  NRVIT_CHECK(!sequences.empty(), "pack: empty sequence list");
  const long width = sequences.front().tokens.cols();
  long total = 0;
  for (const auto& s : sequences) {
    NRVIT_CHECK(s.tokens.rows() >= 1, "pack: empty sequence in list");
    NRVIT_CHECK(s.tokens.cols() == width, "pack: token width mismatch");
    NRVIT_CHECK(static_cast<long>(s.positions.size()) == s.tokens.rows(),
                "pack: positions do not match token rows");
    total += s.tokens.rows();
  }
  PackedBatch<T> batch;
  batch.tokens.resize(total, width);
  batch.boundaries.reserve(sequences.size() + 1);
  batch.boundaries.push_back(0);
  batch.positions.reserve(static_cast<std::size_t>(total));
  long offset = 0;
  for (const auto& s : sequences) {
    batch.tokens.middleRows(offset, s.tokens.rows()) = s.tokens;
    offset += s.tokens.rows();
    batch.boundaries.push_back(offset);
    batch.grids.push_back(s.grid);
    batch.positions.insert(batch.positions.end(), s.positions.begin(),
                           s.positions.end());
  }
  return batch;
}

// Segment index owning token row i.
template <typename T>
long segment_of(const PackedBatch<T>& batch, long i) {
  NRVIT_CHECK(i >= 0 && i < batch.total_tokens(),
              "segment_of: token index out of range");
  const auto it = std::upper_bound(batch.boundaries.begin(),
                                   batch.boundaries.end(), i);
  return static_cast<long>(it - batch.boundaries.begin()) - 1;
}

// The attention-isolation contract: i may attend to j iff they share a
// segment. Block-diagonal by construction; a dense mask exists only as a
// test oracle.
template <typename T>
bool attention_allowed(const PackedBatch<T>& batch, long i, long j) {
  return segment_of(batch, i) == segment_of(batch, j);
}

// Inverse of pack.
template <typename T>
std::vector<Mat<T>> unpack(const PackedBatch<T>& batch) {
  batch.validate();
  std::vector<Mat<T>> out;
  out.reserve(static_cast<std::size_t>(batch.segments()));
  for (long k = 0; k < batch.segments(); ++k) {
    out.push_back(batch.tokens.middleRows(
        batch.boundaries[static_cast<std::size_t>(k)],
        batch.segment_length(k)));
  }
  return out;
}

// Keeps a uniformly random subset of ceil(N * (1 - rate)) rows, preserving
// patchify order and the original grid coordinates of the survivors.
template <typename T>
TokenSequence<T> patch_dropout(const TokenSequence<T>& seq, double rate,
                               Rng& rng) {
  NRVIT_CHECK(rate >= 0.0 && rate < 1.0, "patch_dropout: rate must be in [0,1)");
  const long n = seq.tokens.rows();
  const long keep = static_cast<long>(
      std::ceil(static_cast<double>(n) * (1.0 - rate)));
  if (keep >= n) return seq;
  std::vector<long> idx(static_cast<std::size_t>(n));
  for (long i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
  // Partial Fisher-Yates: the first `keep` entries are the kept subset.
  for (long i = 0; i < keep; ++i) {
    const long j = i + rng.uniform_int(n - i);
    std::swap(idx[static_cast<std::size_t>(i)],
              idx[static_cast<std::size_t>(j)]);
  }
  idx.resize(static_cast<std::size_t>(keep));
  std::sort(idx.begin(), idx.end());
  TokenSequence<T> out;
  out.grid = seq.grid;
  out.tokens.resize(keep, seq.tokens.cols());
  out.positions.reserve(static_cast<std::size_t>(keep));
  for (long i = 0; i < keep; ++i) {
    out.tokens.row(i) = seq.tokens.row(idx[static_cast<std::size_t>(i)]);
    out.positions.push_back(
        seq.positions[static_cast<std::size_t>(idx[static_cast<std::size_t>(i)])]);
  }
  return out;
}

}  // namespace nrvit
