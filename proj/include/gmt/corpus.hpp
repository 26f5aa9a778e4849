#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "gmt/matrix.hpp"

namespace gmt {

class Tokenizer {
 public:
  virtual ~Tokenizer() = default;
  virtual std::vector<std::uint32_t> encode(std::string_view text) const = 0;
  virtual std::string decode(std::span<const std::uint32_t> ids) const = 0;
  virtual std::size_t vocab_size() const = 0;
  virtual std::uint32_t eot_id() const = 0;
  virtual std::string name() const = 0;
  /// Printable form of a single token for traces.
  virtual std::string token_text(std::uint32_t id) const;
};

/// Ids 0-255 are raw bytes, 256 is end-of-text.
class ByteTokenizer final : public Tokenizer {
 public:
  static constexpr std::uint32_t kEot = 256;

  std::vector<std::uint32_t> encode(std::string_view text) const override;
  std::string decode(std::span<const std::uint32_t> ids) const override;
  std::size_t vocab_size() const override { return 257; }
  std::uint32_t eot_id() const override { return kEot; }
  std::string name() const override { return "byte"; }
  std::string token_text(std::uint32_t id) const override;
};

struct TokenWindowStream {
  std::vector<std::uint16_t> ids;
  std::size_t vocab_size = 257;
  std::uint32_t eot_id = ByteTokenizer::kEot;
  std::string tokenizer_name = "byte";

  std::size_t size() const { return ids.size(); }
};

/// Each document's ids followed by the end-of-text id.
TokenWindowStream tokenize_documents(std::span<const std::string> docs, const Tokenizer& tokenizer);

struct SplitSpec {
  Real train_fraction = 0.95;
  void validate() const;
};

/// First floor(f·D) documents train, the rest validate.
std::pair<std::vector<std::string>, std::vector<std::string>> split_documents(std::span<const std::string> docs,
                                                                              const SplitSpec& spec);

/// floor((N − 1) / T): every window needs T inputs plus one shifted target.
std::size_t window_count(const TokenWindowStream& stream, std::size_t T);

struct Window {
  std::vector<std::uint32_t> input;
  std::vector<std::uint32_t> target;
};

Window get_window(const TokenWindowStream& stream, std::size_t i, std::size_t T);

/// B windows of length T laid out back to back.
struct Batch {
  std::vector<std::uint32_t> inputs;
  std::vector<std::uint32_t> targets;
  std::size_t seq_len = 0;

  std::size_t sequences() const { return seq_len ? inputs.size() / seq_len : 0; }
};

Batch make_batch(const TokenWindowStream& stream, std::span<const std::size_t> windows, std::size_t T);

/// Seeded permutation of [0, count) for the given epoch.
std::vector<std::size_t> epoch_order(std::size_t count, std::uint64_t seed, std::uint64_t epoch);

enum class DocumentMode { per_file, blank_line };

/// UTF-8 text files under `dir`, in sorted path order.
std::vector<std::string> read_documents(const std::filesystem::path& dir, DocumentMode mode);
std::vector<std::string> split_blank_lines(std::string_view text);

/// Little-endian u16 ids at `path`, manifest at `path` + ".json".
void save_stream(const TokenWindowStream& stream, const std::filesystem::path& path);
TokenWindowStream load_stream(const std::filesystem::path& path);

}  // namespace gmt
