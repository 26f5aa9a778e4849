#include "gmt/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "gmt/random.hpp"
#include "json.hpp"

namespace gmt {

namespace fs = std::filesystem;

std::string Tokenizer::token_text(std::uint32_t id) const {
  const std::uint32_t one[] = {id};
  return decode(one);
}

std::vector<std::uint32_t> ByteTokenizer::encode(std::string_view text) const {
  std::vector<std::uint32_t> ids;
  ids.reserve(text.size());
  for (char c : text) ids.push_back(static_cast<unsigned char>(c));
  return ids;
}

std::string ByteTokenizer::decode(std::span<const std::uint32_t> ids) const {
  std::string out;
  for (std::uint32_t id : ids) {
    if (id == kEot) continue;
    if (id > 255) throw DomainError("byte tokenizer has no id " + std::to_string(id));
    out.push_back(static_cast<char>(id));
  }
  return out;
}

std::string ByteTokenizer::token_text(std::uint32_t id) const {
  if (id == kEot) return "<|endoftext|>";
  if (id > 255) throw DomainError("byte tokenizer has no id " + std::to_string(id));
  return std::string(1, static_cast<char>(id));
}

TokenWindowStream tokenize_documents(std::span<const std::string> docs, const Tokenizer& tokenizer) {
  TokenWindowStream s;
  s.vocab_size = tokenizer.vocab_size();
  s.eot_id = tokenizer.eot_id();
  s.tokenizer_name = tokenizer.name();
  if (s.vocab_size > 65536 || s.eot_id >= 65536)
    throw ConfigurationError("tokenizer ids do not fit in 16 bits");
  for (const std::string& doc : docs) {
    for (std::uint32_t id : tokenizer.encode(doc)) {
      if (id >= 65536) throw ConfigurationError("token id " + std::to_string(id) + " does not fit in 16 bits");
      if (id >= s.vocab_size) throw ConfigurationError("token id " + std::to_string(id) + " outside the vocabulary");
      s.ids.push_back(static_cast<std::uint16_t>(id));
    }
    s.ids.push_back(static_cast<std::uint16_t>(s.eot_id));
  }
  return s;
}

void SplitSpec::validate() const {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw ConfigurationError("train_fraction must lie in (0, 1)");
}

std::pair<std::vector<std::string>, std::vector<std::string>> split_documents(std::span<const std::string> docs,
                                                                              const SplitSpec& spec) {
  spec.validate();
  if (docs.size() < 2) throw ConfigurationError("need at least 2 documents to split");
  const auto n_train = static_cast<std::size_t>(std::floor(spec.train_fraction * static_cast<Real>(docs.size())));
  if (n_train == 0 || n_train == docs.size())
    throw ConfigurationError("split of " + std::to_string(docs.size()) + " documents leaves one side empty");
  return {std::vector<std::string>(docs.begin(), docs.begin() + static_cast<std::ptrdiff_t>(n_train)),
          std::vector<std::string>(docs.begin() + static_cast<std::ptrdiff_t>(n_train), docs.end())};
}

std::size_t window_count(const TokenWindowStream& stream, std::size_t T) {
  if (T == 0) throw ConfigurationError("window length must be at least 1");
  if (stream.ids.size() < 2) return 0;
  return (stream.ids.size() - 1) / T;
}

Window get_window(const TokenWindowStream& stream, std::size_t i, std::size_t T) {
  if (i >= window_count(stream, T))
    throw DomainError("window " + std::to_string(i) + " out of range (" + std::to_string(window_count(stream, T)) + ")");
  Window w;
  w.input.assign(stream.ids.begin() + static_cast<std::ptrdiff_t>(i * T),
                 stream.ids.begin() + static_cast<std::ptrdiff_t>(i * T + T));
  w.target.assign(stream.ids.begin() + static_cast<std::ptrdiff_t>(i * T + 1),
                  stream.ids.begin() + static_cast<std::ptrdiff_t>(i * T + T + 1));
  return w;
}

Batch make_batch(const TokenWindowStream& stream, std::span<const std::size_t> windows, std::size_t T) {
  if (windows.empty()) throw ConfigurationError("empty batch");
  Batch b;
  b.seq_len = T;
  b.inputs.reserve(windows.size() * T);
  b.targets.reserve(windows.size() * T);
  for (std::size_t i : windows) {
    Window w = get_window(stream, i, T);
    b.inputs.insert(b.inputs.end(), w.input.begin(), w.input.end());
    b.targets.insert(b.targets.end(), w.target.begin(), w.target.end());
  }
  return b;
}

std::vector<std::size_t> epoch_order(std::size_t count, std::uint64_t seed, std::uint64_t epoch) {
  std::vector<std::size_t> order(count);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch), static_cast<std::uint32_t>(epoch >> 32), 0x5eedu};
  Rng rng(seq);
  for (std::size_t i = count; i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(order[i - 1], order[j]);
  }
  return order;
}

std::vector<std::string> split_blank_lines(std::string_view text) {
  std::vector<std::string> docs;
  std::string current;
  std::size_t pos = 0;
  auto flush = [&] {
    while (!current.empty() && current.back() == '\n') current.pop_back();
    if (!current.empty()) docs.push_back(current);
    current.clear();
  };
  while (pos <= text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(pos, end - pos);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.find_first_not_of(" \t") == std::string_view::npos) {
      flush();
    } else {
      current.append(line);
      current.push_back('\n');
    }
    pos = end + 1;
  }
  flush();
  return docs;
}

std::vector<std::string> read_documents(const fs::path& dir, DocumentMode mode) {
  if (!fs::is_directory(dir)) throw ConfigurationError("not a directory: " + dir.string());
  std::vector<fs::path> files;
  for (const auto& entry : fs::recursive_directory_iterator(dir))
    if (entry.is_regular_file()) files.push_back(entry.path());
  std::sort(files.begin(), files.end());
  std::vector<std::string> docs;
  for (const fs::path& f : files) {
    std::ifstream in(f, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    if (mode == DocumentMode::per_file) {
      docs.push_back(ss.str());
    } else {
      for (std::string& d : split_blank_lines(ss.str())) docs.push_back(std::move(d));
    }
  }
  return docs;
}

void save_stream(const TokenWindowStream& stream, const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigurationError("cannot write " + path.string());
  std::vector<unsigned char> bytes(stream.ids.size() * 2);
  for (std::size_t i = 0; i < stream.ids.size(); ++i) {
    bytes[2 * i] = static_cast<unsigned char>(stream.ids[i] & 0xff);
    bytes[2 * i + 1] = static_cast<unsigned char>(stream.ids[i] >> 8);
  }
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  nlohmann::json manifest = {{"vocab_size", stream.vocab_size},
                             {"eot_id", stream.eot_id},
                             {"token_count", stream.ids.size()},
                             {"tokenizer_name", stream.tokenizer_name}};
  std::ofstream(path.string() + ".json") << manifest.dump(2) << "\n";
}

TokenWindowStream load_stream(const fs::path& path) {
  std::ifstream mf(path.string() + ".json");
  if (!mf) throw LoadError("missing stream manifest " + path.string() + ".json");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(mf);
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(std::string("bad stream manifest: ") + e.what());
  }
  TokenWindowStream s;
  std::size_t count = 0;
  try {
    s.vocab_size = manifest.at("vocab_size").get<std::size_t>();
    s.eot_id = manifest.at("eot_id").get<std::uint32_t>();
    count = manifest.at("token_count").get<std::size_t>();
    s.tokenizer_name = manifest.at("tokenizer_name").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(std::string("bad stream manifest: ") + e.what());
  }
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot read " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() != 2 * count)
    throw LoadError("stream holds " + std::to_string(bytes.size()) + " bytes, manifest says " +
                    std::to_string(count) + " tokens");
  s.ids.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    s.ids[i] = static_cast<std::uint16_t>(bytes[2 * i] | (bytes[2 * i + 1] << 8));
    if (s.ids[i] >= s.vocab_size) throw LoadError("stream id " + std::to_string(s.ids[i]) + " outside the vocabulary");
  }
  return s;
}

}  // namespace gmt
