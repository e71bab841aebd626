#pragma once

// Statute records: ingestion, rendering into training documents, dataset
// splits, evaluation probes and the citation index.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "lexlm/tokenizer.hpp"

namespace lexlm {

struct StatuteRecord {
  std::string act;      // short code, e.g. "IPC"
  std::string section;  // digits plus an optional letter, e.g. "498A"
  std::string title;
  std::string body;
  std::string source;  // "file:line", informational only

  friend bool operator==(const StatuteRecord& a, const StatuteRecord& b) {
    return a.act == b.act && a.section == b.section && a.title == b.title && a.body == b.body;
  }
};

enum class CorpusFormat { Jsonl, Plain };
std::optional<CorpusFormat> parse_corpus_format(std::string_view s) noexcept;

/// One record per non-blank line with string fields act, section, title, body.
std::vector<StatuteRecord> parse_jsonl(std::string_view text, const std::string& source);

/// Headings look like `302. Punishment for murder.` followed by U+2014 and the
/// start of the body; body lines continue until the next heading. Lines are
/// trimmed and joined with single spaces; blank lines are skipped.
std::vector<StatuteRecord> parse_plain(std::string_view text, const std::string& act, const std::string& source);

/// Reads files (directories are expanded to their regular files, sorted).
/// Plain files take their act code from `act`, else from a `<file>.act`
/// sidecar. Throws DataError on malformed input or duplicate (act, section).
std::vector<StatuteRecord> ingest(const std::vector<std::filesystem::path>& paths, CorpusFormat format,
                                  const std::optional<std::string>& act = std::nullopt);

std::string to_jsonl(const std::vector<StatuteRecord>& records);
void write_jsonl(const std::filesystem::path& path, const std::vector<StatuteRecord>& records);

/// "{act} Section {section}. {title}. {body}"
std::string render_document(const StatuteRecord& r);
/// "{act} Section {section}. {title}." -- the document up to its body.
std::string render_prompt(const StatuteRecord& r);

struct Dataset {
  std::vector<std::vector<TokenId>> train;  // one entry per document, end token included
  std::vector<std::vector<TokenId>> val;
  std::vector<std::size_t> train_records;  // record indices, in document order
  std::vector<std::size_t> val_records;

  static std::vector<TokenId> flatten(const std::vector<std::vector<TokenId>>& docs);
};

/// Renders and encodes every record, shuffles the documents with `seed`, and
/// keeps the last ceil(val_frac * N) as validation.
Dataset build_dataset(const std::vector<StatuteRecord>& records, const Tokenizer& tok, double val_frac,
                      std::uint64_t seed);

/// Exact (act, section) lookup, case-insensitive on the act code.
class CitationIndex {
 public:
  /// Throws DataError on duplicates.
  static CitationIndex build(const std::vector<StatuteRecord>& records);
  const StatuteRecord* lookup(std::string_view act, std::string_view section) const;
  std::size_t size() const noexcept { return map_.size(); }

 private:
  std::map<std::pair<std::string, std::string>, StatuteRecord> map_;
};

struct Probe {
  std::string prompt;
  std::string expected;
  std::string act;
  std::string section;
};

/// One probe per record: prompt = render_prompt, expected = body.
std::vector<Probe> make_probes(const std::vector<StatuteRecord>& records);
std::string probes_to_jsonl(const std::vector<Probe>& probes);
std::vector<Probe> parse_probes(std::string_view text, const std::string& source);
std::vector<Probe> load_probes(const std::filesystem::path& path);

/// Built-in synthetic statutes (paraphrased, not official text) spanning
/// IPC, CrPC and COI, some citing each other. At most 50.
std::vector<StatuteRecord> synthetic_statutes(std::size_t n = 50);

std::string read_text_file(const std::filesystem::path& path);

}  // namespace lexlm
