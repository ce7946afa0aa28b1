#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "nrvit/image_io.hpp"
#include "nrvit/pipeline.hpp"

namespace nrvit {

// Word-level vocabulary with a terminal <eos>. Construction is deterministic
// (sorted unique words), so two runs over the same corpus agree on ids.
class Vocabulary {
 public:
  Vocabulary() = default;
  explicit Vocabulary(const std::set<std::string>& words) {
    for (const auto& w : words) {
      id_of_[w] = static_cast<int>(words_.size());
      words_.push_back(w);
    }
    eos_ = static_cast<int>(words_.size());
    words_.push_back("<eos>");
    id_of_["<eos>"] = eos_;
  }

  static Vocabulary from_captions(const std::vector<std::string>& captions) {
    std::set<std::string> words;
    for (const auto& c : captions) {
      std::istringstream ss(c);
      std::string w;
      while (ss >> w) words.insert(w);
    }
    return Vocabulary(words);
  }

  static Vocabulary from_word_list(const std::vector<std::string>& words) {
    Vocabulary v;
    v.words_ = words;
    for (std::size_t i = 0; i < words.size(); ++i)
      v.id_of_[words[i]] = static_cast<int>(i);
    const auto it = v.id_of_.find("<eos>");
    NRVIT_CHECK(it != v.id_of_.end(), "Vocabulary: word list lacks <eos>");
    v.eos_ = it->second;
    return v;
  }

  std::vector<int> tokenize(const std::string& caption) const {
    std::vector<int> ids;
    std::istringstream ss(caption);
    std::string w;
    while (ss >> w) {
      const auto it = id_of_.find(w);
      NRVIT_CHECK(it != id_of_.end(),
                  "Vocabulary: unknown word '" + w + "'");
      ids.push_back(it->second);
    }
    ids.push_back(eos_);
    return ids;
  }

  int size() const { return static_cast<int>(words_.size()); }
  int eos_id() const { return eos_; }
  const std::vector<std::string>& words() const { return words_; }

 private:
  std::vector<std::string> words_;
  std::map<std::string, int> id_of_;
  int eos_ = 0;
};

struct ManifestEntry {
  std::string id;
  std::string path;  // resolved against the manifest's directory
  Modality modality = Modality::Image;
  std::string caption;
};

// JSON-lines manifest: one {id, path, modality, caption} object per line.
inline std::vector<ManifestEntry> read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("read_manifest: cannot open " + path);
  const auto base = std::filesystem::path(path).parent_path();
  std::vector<ManifestEntry> entries;
  std::string line;
  long lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw std::runtime_error("read_manifest: bad JSON at line " +
                               std::to_string(lineno) + ": " + e.what());
    }
    ManifestEntry e;
    e.id = j.at("id").get<std::string>();
    const std::string rel = j.at("path").get<std::string>();
    e.path = (base / rel).string();
    const std::string mod = j.at("modality").get<std::string>();
    if (mod == "image")
      e.modality = Modality::Image;
    else if (mod == "video")
      e.modality = Modality::Video;
    else
      throw std::runtime_error("read_manifest: unknown modality '" + mod +
                               "' at line " + std::to_string(lineno));
    e.caption = j.at("caption").get<std::string>();
    entries.push_back(std::move(e));
  }
  return entries;
}

// Disk-backed corpus over a manifest. Samples are loaded on demand; captions
// are tokenized against a vocabulary built from the manifest itself (or an
// externally supplied one, e.g. restored from a checkpoint).
template <typename T>
class ManifestCorpus : public CorpusInterface<T> {
 public:
  explicit ManifestCorpus(const std::string& manifest_path)
      : ManifestCorpus(read_manifest(manifest_path)) {}

  explicit ManifestCorpus(std::vector<ManifestEntry> entries,
                          std::optional<Vocabulary> vocab = std::nullopt)
      : entries_(std::move(entries)) {
    NRVIT_CHECK(!entries_.empty(), "ManifestCorpus: empty manifest");
    std::vector<std::string> captions;
    for (const auto& e : entries_) {
      NRVIT_CHECK(!by_id_.count(e.id),
                  "ManifestCorpus: duplicate id '" + e.id + "'");
      by_id_[e.id] = &e;
      captions.push_back(e.caption);
      (e.modality == Modality::Image ? image_ids_ : video_ids_)
          .push_back(e.id);
    }
    vocab_ = vocab ? std::move(*vocab) : Vocabulary::from_captions(captions);
  }

  std::vector<std::string> image_ids() const override { return image_ids_; }
  std::vector<std::string> video_ids() const override { return video_ids_; }

  VisualSample<T> load(const std::string& id) const override {
    const ManifestEntry& e = entry(id);
    VisualSample<T> s = e.modality == Modality::Video
                            ? load_video_dir<T>(e.path)
                            : load_image<T>(e.path);
    s.id = e.id;
    return s;
  }

  std::vector<int> caption_tokens(const std::string& id) const override {
    return vocab_.tokenize(entry(id).caption);
  }

  const Vocabulary& vocab() const { return vocab_; }
  const std::vector<ManifestEntry>& entries() const { return entries_; }

 private:
  const ManifestEntry& entry(const std::string& id) const {
    const auto it = by_id_.find(id);
    NRVIT_CHECK(it != by_id_.end(), "ManifestCorpus: unknown id '" + id + "'");
    return *it->second;
  }

  std::vector<ManifestEntry> entries_;
  std::map<std::string, const ManifestEntry*> by_id_;
  std::vector<std::string> image_ids_, video_ids_;
  Vocabulary vocab_;
};

}  // namespace nrvit
