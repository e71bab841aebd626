#include "lexlm/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <regex>
#include <sstream>

#include <json.hpp>

#include "lexlm/error.hpp"
#include "lexlm/rng.hpp"

namespace lexlm {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string trim(std::string_view s) {
  std::size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return std::string(s.substr(a, b - a));
}

std::string upper(std::string_view s) {
  std::string out(s);
  for (auto& ch : out) ch = static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
  return out;
}

bool valid_section(const std::string& s) {
  static const std::regex re(R"(^\d+[A-Za-z]?$)");
  return std::regex_match(s, re);
}

std::vector<std::string_view> split_lines(std::string_view text) {
  std::vector<std::string_view> lines;
  std::size_t start = 0;
  while (start <= text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(start, end - start);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    lines.push_back(line);
    if (end == text.size()) break;
    start = end + 1;
  }
  return lines;
}

[[noreturn]] void bad_line(const std::string& source, std::size_t line, const std::string& what) {
  throw DataError(source + ":" + std::to_string(line) + ": " + what);
}

void check_record(const StatuteRecord& r, const std::string& source, std::size_t line) {
  if (r.act.empty()) bad_line(source, line, "empty act code");
  if (!valid_section(r.section)) bad_line(source, line, "section \"" + r.section + "\" is not digits plus an optional letter");
  if (r.body.empty()) bad_line(source, line, "empty body");
}

void reject_duplicates(const std::vector<StatuteRecord>& records) {
  std::map<std::pair<std::string, std::string>, const StatuteRecord*> seen;
  for (const auto& r : records) {
    auto [it, fresh] = seen.emplace(std::pair{upper(r.act), r.section}, &r);
    if (!fresh) {
      throw DataError("duplicate " + r.act + " Section " + r.section + ": " + it->second->source + " and " +
                      r.source);
    }
  }
}

}  // namespace

std::optional<CorpusFormat> parse_corpus_format(std::string_view s) noexcept {
  if (s == "jsonl") return CorpusFormat::Jsonl;
  if (s == "plain") return CorpusFormat::Plain;
  return std::nullopt;
}

std::string read_text_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<StatuteRecord> parse_jsonl(std::string_view text, const std::string& source) {
  std::vector<StatuteRecord> out;
  const auto lines = split_lines(text);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (trim(lines[i]).empty()) continue;
    json j;
    try {
      j = json::parse(lines[i]);
    } catch (const json::exception&) {
      bad_line(source, i + 1, "not valid JSON");
    }
    if (!j.is_object()) bad_line(source, i + 1, "expected a JSON object");
    StatuteRecord r;
    for (const char* key : {"act", "section", "title", "body"}) {
      if (!j.contains(key) || !j[key].is_string()) {
        bad_line(source, i + 1, std::string("missing string field \"") + key + "\"");
      }
    }
    r.act = j["act"].get<std::string>();
    r.section = j["section"].get<std::string>();
    r.title = j["title"].get<std::string>();
    r.body = j["body"].get<std::string>();
    r.source = source + ":" + std::to_string(i + 1);
    check_record(r, source, i + 1);
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<StatuteRecord> parse_plain(std::string_view text, const std::string& act, const std::string& source) {
  static const std::regex heading("^(\\d+[A-Za-z]?)\\. (.+?)\\.\xE2\x80\x94(.*)$");
  std::vector<StatuteRecord> out;
  const auto lines = split_lines(text);
  auto append = [](std::string& body, const std::string& piece) {
    if (piece.empty()) return;
    if (!body.empty()) body += ' ';
    body += piece;
  };
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const std::string line(lines[i]);
    std::smatch m;
    if (std::regex_match(line, m, heading)) {
      StatuteRecord r;
      r.act = act;
      r.section = m[1];
      r.title = trim(m[2].str());
      r.source = source + ":" + std::to_string(i + 1);
      append(r.body, trim(m[3].str()));
      out.push_back(std::move(r));
      continue;
    }
    const std::string t = trim(line);
    if (t.empty()) continue;
    if (out.empty()) bad_line(source, i + 1, "text before the first section heading");
    append(out.back().body, t);
  }
  for (const auto& r : out) {
    const auto line = static_cast<std::size_t>(std::stoul(r.source.substr(r.source.rfind(':') + 1)));
    check_record(r, source, line);
  }
  return out;
}

std::vector<StatuteRecord> ingest(const std::vector<fs::path>& paths, CorpusFormat format,
                                  const std::optional<std::string>& act) {
  std::vector<fs::path> files;
  for (const auto& p : paths) {
    std::error_code ec;
    if (fs::is_directory(p, ec)) {
      std::vector<fs::path> inner;
      for (const auto& e : fs::directory_iterator(p)) {
        if (e.is_regular_file() && e.path().extension() != ".act") inner.push_back(e.path());
      }
      std::sort(inner.begin(), inner.end());
      files.insert(files.end(), inner.begin(), inner.end());
    } else {
      files.push_back(p);
    }
  }

  std::vector<StatuteRecord> all;
  for (const auto& f : files) {
    const std::string text = read_text_file(f);
    std::vector<StatuteRecord> recs;
    if (format == CorpusFormat::Jsonl) {
      recs = parse_jsonl(text, f.string());
    } else {
      std::string code;
      if (act) {
        code = *act;
      } else {
        const fs::path sidecar = f.string() + ".act";
        if (!fs::exists(sidecar)) {
          throw UsageError("no act code for " + f.string() + ": pass --act or create " + sidecar.string());
        }
        code = trim(read_text_file(sidecar));
      }
      if (code.empty()) throw UsageError("empty act code for " + f.string());
      recs = parse_plain(text, code, f.string());
    }
    all.insert(all.end(), std::make_move_iterator(recs.begin()), std::make_move_iterator(recs.end()));
  }
  reject_duplicates(all);
  return all;
}

std::string to_jsonl(const std::vector<StatuteRecord>& records) {
  std::string out;
  for (const auto& r : records) {
    out += json{{"act", r.act}, {"section", r.section}, {"title", r.title}, {"body", r.body}}.dump();
    out += '\n';
  }
  return out;
}

void write_jsonl(const fs::path& path, const std::vector<StatuteRecord>& records) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << to_jsonl(records);
  if (!out) throw DataError("failed writing " + path.string());
}

std::string render_document(const StatuteRecord& r) { return render_prompt(r) + " " + r.body; }

std::string render_prompt(const StatuteRecord& r) {
  return r.act + " Section " + r.section + ". " + r.title + ".";
}

std::vector<TokenId> Dataset::flatten(const std::vector<std::vector<TokenId>>& docs) {
  std::vector<TokenId> out;
  for (const auto& d : docs) out.insert(out.end(), d.begin(), d.end());
  return out;
}

Dataset build_dataset(const std::vector<StatuteRecord>& records, const Tokenizer& tok, double val_frac,
                      std::uint64_t seed) {
  if (records.empty()) throw DataError("no statute records to build a dataset from");
  if (!(val_frac >= 0.0 && val_frac < 1.0)) throw UsageError("val_frac must be in [0, 1)");
  std::vector<std::size_t> order(records.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(seed, 0xda7a);
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);

  const auto n_val = static_cast<std::size_t>(std::ceil(val_frac * static_cast<double>(records.size())));
  Dataset ds;
  for (std::size_t k = 0; k < order.size(); ++k) {
    auto ids = tok.encode(render_document(records[order[k]]));
    ids.push_back(tok.eod_id());
    const bool is_val = k >= order.size() - n_val;
    (is_val ? ds.val : ds.train).push_back(std::move(ids));
    (is_val ? ds.val_records : ds.train_records).push_back(order[k]);
  }
  return ds;
}

CitationIndex CitationIndex::build(const std::vector<StatuteRecord>& records) {
  reject_duplicates(records);
  CitationIndex idx;
  for (const auto& r : records) idx.map_.emplace(std::pair{upper(r.act), r.section}, r);
  return idx;
}

const StatuteRecord* CitationIndex::lookup(std::string_view act, std::string_view section) const {
  auto it = map_.find({upper(act), std::string(section)});
  return it == map_.end() ? nullptr : &it->second;
}

std::vector<Probe> make_probes(const std::vector<StatuteRecord>& records) {
  std::vector<Probe> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back({render_prompt(r), r.body, r.act, r.section});
  return out;
}

std::string probes_to_jsonl(const std::vector<Probe>& probes) {
  std::string out;
  for (const auto& p : probes) {
    out += json{{"prompt", p.prompt}, {"expected", p.expected}, {"act", p.act}, {"section", p.section}}.dump();
    out += '\n';
  }
  return out;
}

std::vector<Probe> parse_probes(std::string_view text, const std::string& source) {
  std::vector<Probe> out;
  const auto lines = split_lines(text);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (trim(lines[i]).empty()) continue;
    json j;
    try {
      j = json::parse(lines[i]);
    } catch (const json::exception&) {
      bad_line(source, i + 1, "not valid JSON");
    }
    if (!j.is_object() || !j.contains("prompt") || !j["prompt"].is_string() || !j.contains("expected") ||
        !j["expected"].is_string()) {
      bad_line(source, i + 1, "probe needs string fields \"prompt\" and \"expected\"");
    }
    Probe p;
    p.prompt = j["prompt"].get<std::string>();
    p.expected = j["expected"].get<std::string>();
    if (j.contains("act") && j["act"].is_string()) p.act = j["act"].get<std::string>();
    if (j.contains("section") && j["section"].is_string()) p.section = j["section"].get<std::string>();
    out.push_back(std::move(p));
  }
  return out;
}

std::vector<Probe> load_probes(const fs::path& path) { return parse_probes(read_text_file(path), path.string()); }

// ------------------------------------------------------------------ synthetic

namespace {

struct Seed {
  const char* act;
  const char* section;
  const char* title;
  const char* body;
};

// Paraphrased summaries written for testing; not the official wording.
constexpr Seed kSynthetic[] = {
    {"IPC", "302", "Punishment for murder",
     "Whoever commits murder shall be punished with death or imprisonment for life, and shall also be liable to fine."},
    {"IPC", "300", "Murder",
     "Culpable homicide is murder when the act is done with the intention of causing death, unless it falls within an exception."},
    {"IPC", "299", "Culpable homicide",
     "Whoever causes death by an act done with the intention of causing death commits culpable homicide."},
    {"IPC", "304", "Punishment for culpable homicide not amounting to murder",
     "Whoever commits culpable homicide not amounting to murder under Section 299 of the IPC shall be punished with imprisonment for up to ten years."},
    {"IPC", "307", "Attempt to murder",
     "Whoever does any act with such intention that, if death were caused, he would be guilty of murder under Section 300 of the IPC, shall be punished."},
    {"IPC", "34", "Acts done by several persons in furtherance of common intention",
     "When a criminal act is done by several persons in furtherance of the common intention of all, each is liable as if done by him alone."},
    {"IPC", "120B", "Punishment of criminal conspiracy",
     "Whoever is a party to a criminal conspiracy to commit a serious offence shall be punished as if he had abetted that offence."},
    {"IPC", "141", "Unlawful assembly",
     "An assembly of five or more persons is unlawful if their common object is to overawe the government or to commit mischief."},
    {"IPC", "319", "Hurt", "Whoever causes bodily pain, disease or infirmity to any person is said to cause hurt."},
    {"IPC", "320", "Grievous hurt",
     "Emasculation, permanent loss of sight or hearing, fracture of a bone or tooth, and disfiguration of the face are grievous hurt."},
    {"IPC", "323", "Punishment for voluntarily causing hurt",
     "Whoever voluntarily causes hurt as defined in Section 319 of the IPC shall be punished with imprisonment up to one year or fine."},
    {"IPC", "339", "Wrongful restraint",
     "Whoever voluntarily obstructs any person so as to prevent that person from proceeding in any direction commits wrongful restraint."},
    {"IPC", "340", "Wrongful confinement",
     "Whoever wrongfully restrains any person so as to prevent that person from proceeding beyond certain limits commits wrongful confinement."},
    {"IPC", "354", "Assault or criminal force to woman with intent to outrage her modesty",
     "Whoever assaults or uses criminal force to any woman intending to outrage her modesty shall be punished with imprisonment."},
    {"IPC", "378", "Theft",
     "Whoever intends to take dishonestly any movable property out of the possession of any person without consent commits theft."},
    {"IPC", "379", "Punishment for theft",
     "Whoever commits theft as defined in Section 378 of the IPC shall be punished with imprisonment up to three years, or fine, or both."},
    {"IPC", "383", "Extortion",
     "Whoever intentionally puts any person in fear of injury and thereby dishonestly induces delivery of property commits extortion."},
    {"IPC", "390", "Robbery", "In all robbery there is either theft or extortion, accompanied by violence or fear of instant harm."},
    {"IPC", "391", "Dacoity",
     "When five or more persons conjointly commit or attempt to commit a robbery, every such person is said to commit dacoity."},
    {"IPC", "405", "Criminal breach of trust",
     "Whoever, being entrusted with property, dishonestly misappropriates it or converts it to his own use commits criminal breach of trust."},
    {"IPC", "415", "Cheating",
     "Whoever, by deceiving any person, fraudulently induces that person to deliver any property is said to cheat."},
    {"IPC", "420", "Cheating and dishonestly inducing delivery of property",
     "Whoever cheats as described in Section 415 of the IPC and thereby induces delivery of property shall be punished with up to seven years."},
    {"IPC", "441", "Criminal trespass",
     "Whoever enters into property in the possession of another with intent to commit an offence or to annoy commits criminal trespass."},
    {"IPC", "463", "Forgery",
     "Whoever makes any false document with intent to cause damage or injury to the public or to any person commits forgery."},
    {"IPC", "498A", "Husband or relative of husband of a woman subjecting her to cruelty",
     "Whoever, being the husband or a relative of the husband of a woman, subjects her to cruelty shall be punished with imprisonment."},
    {"IPC", "499", "Defamation",
     "Whoever makes or publishes any imputation concerning any person intending to harm the reputation of that person defames that person."},
    {"IPC", "503", "Criminal intimidation",
     "Whoever threatens another with any injury to his person, reputation or property, intending to cause alarm, commits criminal intimidation."},
    {"CrPC", "41", "When police may arrest without warrant",
     "Any police officer may without a warrant arrest any person who commits a cognizable offence in his presence."},
    {"CrPC", "154", "Information in cognizable cases",
     "Every information relating to a cognizable offence given orally to an officer in charge of a police station shall be reduced to writing."},
    {"CrPC", "161", "Examination of witnesses by police",
     "Any police officer making an investigation may examine orally any person supposed to be acquainted with the facts of the case."},
    {"CrPC", "164", "Recording of confessions and statements",
     "Any magistrate may record any confession or statement made during an investigation, after warning that it may be used as evidence."},
    {"CrPC", "167", "Procedure when investigation cannot be completed in twenty-four hours",
     "When an investigation cannot be completed within twenty-four hours, the accused shall be forwarded to the nearest magistrate."},
    {"CrPC", "173", "Report of police officer on completion of investigation",
     "Every investigation shall be completed without unnecessary delay, and the officer shall forward a report to the magistrate."},
    {"CrPC", "200", "Examination of complainant",
     "A magistrate taking cognizance of an offence on complaint shall examine upon oath the complainant and the witnesses present."},
    {"CrPC", "125", "Order for maintenance of wives, children and parents",
     "A magistrate may order a person with sufficient means who neglects to maintain his wife, child or parent to pay a monthly allowance."},
    {"CrPC", "436", "In what cases bail to be taken",
     "When any person accused of a bailable offence is arrested and is prepared to give bail, such person shall be released on bail."},
    {"CrPC", "437", "When bail may be taken in case of non-bailable offence",
     "A person accused of a non-bailable offence may be released on bail, but not where there are grounds to believe he committed an offence under Section 302 of the IPC."},
    {"CrPC", "438", "Direction for grant of bail to person apprehending arrest",
     "Where any person has reason to believe that he may be arrested for a non-bailable offence, he may apply to the High Court for anticipatory bail."},
    {"CrPC", "482", "Saving of inherent powers of High Court",
     "Nothing in this Code shall limit the inherent powers of the High Court to prevent abuse of the process of any court."},
    {"CrPC", "313", "Power to examine the accused",
     "In every inquiry or trial the court may question the accused to enable him to explain any circumstances appearing in the evidence."},
    {"COI", "14", "Equality before law",
     "The State shall not deny to any person equality before the law or the equal protection of the laws within the territory of India."},
    {"COI", "19", "Protection of certain rights regarding freedom of speech",
     "All citizens shall have the right to freedom of speech and expression, to assemble peaceably, and to form associations."},
    {"COI", "21", "Protection of life and personal liberty",
     "No person shall be deprived of his life or personal liberty except according to procedure established by law."},
    {"COI", "21A", "Right to education",
     "The State shall provide free and compulsory education to all children of the age of six to fourteen years."},
    {"COI", "22", "Protection against arrest and detention in certain cases",
     "No person who is arrested shall be detained in custody without being informed of the grounds for such arrest, as Section 21 of the COI also protects."},
    {"COI", "32", "Remedies for enforcement of rights conferred by this Part",
     "The right to move the Supreme Court for the enforcement of the rights in Section 14 of the COI and Section 21 of the COI is guaranteed."},
    {"COI", "226", "Power of High Courts to issue certain writs",
     "Every High Court shall have power to issue writs, including habeas corpus, for the enforcement of fundamental rights."},
    {"COI", "300A", "Persons not to be deprived of property save by authority of law",
     "No person shall be deprived of his property save by authority of law."},
    {"COI", "51A", "Fundamental duties",
     "It shall be the duty of every citizen to abide by the Constitution and respect its ideals and institutions."},
    {"COI", "20", "Protection in respect of conviction for offences",
     "No person shall be prosecuted and punished for the same offence more than once, nor compelled to be a witness against himself."},
};

}  // namespace

std::vector<StatuteRecord> synthetic_statutes(std::size_t n) {
  constexpr std::size_t total = sizeof(kSynthetic) / sizeof(kSynthetic[0]);
  static_assert(total == 50);
  if (n > total) throw UsageError("at most " + std::to_string(total) + " synthetic statutes are available");
  std::vector<StatuteRecord> out;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& s = kSynthetic[i];
    out.push_back({s.act, s.section, s.title, s.body, "synthetic:" + std::to_string(i + 1)});
  }
  return out;
}

}  // namespace lexlm
