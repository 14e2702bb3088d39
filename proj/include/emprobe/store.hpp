#pragma once

// Single-record binary files.
//
// Layout (all integers and reals little-endian):
//   magic    8 bytes  "EMPROBE1"
//   kind     u8       RecordKind
//   version  u16      kStoreVersion
//   header   u64 dimension counts, kind specific
//   payload  raw real64 (or u64 / u32 for integer records)
//   labels   optional, matrices only: u64 count, then u64 byte length + UTF-8 per label

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <variant>

#include "emprobe/error.hpp"
#include "emprobe/records.hpp"

namespace emprobe::store {

inline constexpr std::string_view kMagic = "EMPROBE1";
inline constexpr std::uint16_t kStoreVersion = 1;

enum class RecordKind : std::uint8_t {
  matrix = 1,
  probstats = 2,
  corpusfreq = 3,
  fit = 4,
  checkpoint = 5,
  tokens = 6,
};

using Record = std::variant<EmbeddingMatrix, ProbStats, CorpusFreq, EncodingFit, Checkpoint, SyntheticCorpus>;

RecordKind kind_of(const Record& record);
std::string_view kind_name(RecordKind kind);

/// Serializes to bytes. Validates the record first (InvariantError).
std::string encode(const Record& record);
/// Parses bytes. Throws StoreError on format problems, InvariantError on bad contents.
Record decode(std::string_view bytes);

/// Atomic: writes a sibling temp file and renames it over `path`.
void write_record(const std::filesystem::path& path, const Record& record);
Record read_record(const std::filesystem::path& path);

/// Writes arbitrary bytes atomically (used for JSON/CSV reports too).
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);
std::string read_file(const std::filesystem::path& path);

template <typename T>
T read_as(const std::filesystem::path& path) {
  Record record = read_record(path);
  if (auto* value = std::get_if<T>(&record)) return std::move(*value);
  throw StoreError("unexpected record kind " + std::string(kind_name(kind_of(record))) + " in " + path.string());
}

}  // namespace emprobe::store
