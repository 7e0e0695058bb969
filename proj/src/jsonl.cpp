#include <fstream>
#include <sstream>
#include <unordered_set>

#include "json.hpp"
#include "plrank/synth_world.hpp"

namespace plrank {

using nlohmann::json;

namespace {

constexpr int kSchemaVersion = 1;

class LineReader {
 public:
  LineReader(const json& obj, int line) : obj_(obj), line_(line) {}

  const json& field(const std::string& name, json::value_t type) const {
    const auto it = obj_.find(name);
    if (it == obj_.end()) fail("missing field '" + name + "'");
    const bool ok = type == json::value_t::number_integer ? it->is_number_integer() : it->type() == type;
    if (!ok) fail("field '" + name + "' has the wrong type");
    return *it;
  }
  std::string str(const std::string& name) const { return field(name, json::value_t::string).get<std::string>(); }
  std::int64_t integer(const std::string& name) const {
    return field(name, json::value_t::number_integer).get<std::int64_t>();
  }
  std::vector<int> ints(const std::string& name) const {
    std::vector<int> out;
    for (const json& v : field(name, json::value_t::array)) {
      if (!v.is_number_integer()) fail("field '" + name + "' must hold integers");
      out.push_back(v.get<int>());
    }
    return out;
  }
  LineReader child(const json& obj, const std::string& name) const {
    if (!obj.is_object()) fail("entries of '" + name + "' must be objects");
    return LineReader(obj, line_);
  }
  [[noreturn]] void fail(const std::string& msg) const {
    throw ParseError("line " + std::to_string(line_) + ": " + msg);
  }

 private:
  const json& obj_;
  int line_;
};

json to_json(const RankingInstance& inst) {
  json history = json::array();
  for (const HistoryEvent& e : inst.ctx.history) history.push_back({{"item_id", e.item_id}, {"tokens", e.tokens}, {"t", e.t}});
  json candidates = json::array();
  for (const CandidateItem& c : inst.candidates) {
    candidates.push_back({{"item_id", c.item_id}, {"tokens", c.tokens}, {"train_frequency", c.train_frequency}});
  }
  return {{"instance_id", inst.instance_id},
          {"user", {{"id", inst.ctx.user_id}, {"profile_tokens", inst.ctx.profile_tokens}, {"history", history}}},
          {"candidates", candidates},
          {"relevance", inst.relevance}};
}

RankingInstance from_json(const LineReader& r) {
  RankingInstance inst;
  inst.instance_id = r.str("instance_id");
  const json& user = r.field("user", json::value_t::object);
  const LineReader ur = r.child(user, "user");
  inst.ctx.user_id = ur.str("id");
  inst.ctx.profile_tokens = ur.ints("profile_tokens");
  for (const json& e : ur.field("history", json::value_t::array)) {
    const LineReader er = r.child(e, "history");
    inst.ctx.history.push_back({er.str("item_id"), er.ints("tokens"), er.integer("t")});
  }
  for (std::size_t i = 1; i < inst.ctx.history.size(); ++i) {
    if (inst.ctx.history[i].t < inst.ctx.history[i - 1].t) r.fail("field 'history' is not sorted by t");
  }
  for (const json& c : r.field("candidates", json::value_t::array)) {
    const LineReader cr = r.child(c, "candidates");
    inst.candidates.push_back({cr.str("item_id"), cr.ints("tokens"), static_cast<int>(cr.integer("train_frequency"))});
  }
  inst.relevance = r.ints("relevance");
  if (inst.relevance.size() != inst.candidates.size()) r.fail("field 'relevance' length differs from 'candidates'");
  return inst;
}

template <typename F>
void for_each_record(const std::string& path, const std::string& kind, F&& on_record, json* header_out = nullptr) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path);
  std::string line;
  int line_no = 0;
  bool header_seen = false;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    json obj;
    try {
      obj = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ParseError("line " + std::to_string(line_no) + ": malformed JSON");
    }
    if (!obj.is_object()) throw ParseError("line " + std::to_string(line_no) + ": expected an object");
    const LineReader r(obj, line_no);
    if (!header_seen) {
      if (r.integer("schema") != kSchemaVersion) r.fail("unsupported schema version");
      if (!kind.empty() && obj.value("kind", std::string()) != kind) r.fail("field 'kind' must be '" + kind + "'");
      if (header_out != nullptr) *header_out = obj;
      header_seen = true;
      continue;
    }
    on_record(r, obj);
  }
}

void write_lines(const std::string& path, json header, const std::vector<json>& records, const ArtifactMeta& meta) {
  if (!meta.empty()) {
    header["config_hash"] = meta.config_hash;
    header["seed"] = meta.seed;
  }
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path + " for writing");
  os << header.dump() << '\n';
  for (const json& r : records) os << r.dump() << '\n';
  if (!os) throw IoError("failed writing " + path);
}

}  // namespace

void save_jsonl(const std::vector<RankingInstance>& instances, const std::string& path, const ArtifactMeta& meta) {
  std::vector<json> records;
  records.reserve(instances.size());
  for (const RankingInstance& inst : instances) records.push_back(to_json(inst));
  write_lines(path, json{{"schema", kSchemaVersion}}, records, meta);
}

std::vector<RankingInstance> load_jsonl(const std::string& path) {
  std::vector<RankingInstance> out;
  std::unordered_set<std::string> seen;
  for_each_record(path, "", [&](const LineReader& r, const json&) {
    RankingInstance inst = from_json(r);
    if (!seen.insert(inst.instance_id).second) r.fail("duplicate instance_id '" + inst.instance_id + "'");
    out.push_back(std::move(inst));
  });
  return out;
}

void save_sft_jsonl(const SftCorpus& corpus, const std::string& path, const ArtifactMeta& meta) {
  std::vector<json> records;
  records.reserve(corpus.examples.size());
  for (const SftExample& ex : corpus.examples) {
    records.push_back({{"instance_id", ex.instance_id},
                       {"item_id", ex.item_id},
                       {"prefix", ex.prefix},
                       {"context_length", ex.context_length},
                       {"target", ex.target},
                       {"teacher_decision", ex.teacher_decision},
                       {"ground_truth", ex.ground_truth}});
  }
  write_lines(path, json{{"schema", kSchemaVersion}, {"kind", "sft"}, {"kept", corpus.kept}, {"rejected", corpus.rejected}},
              records, meta);
}

SftCorpus load_sft_jsonl(const std::string& path) {
  SftCorpus corpus;
  json header;
  for_each_record(
      path, "sft",
      [&](const LineReader& r, const json&) {
        SftExample ex;
        ex.instance_id = r.str("instance_id");
        ex.item_id = r.str("item_id");
        ex.prefix = r.ints("prefix");
        ex.context_length = static_cast<int>(r.integer("context_length"));
        ex.target = r.ints("target");
        ex.teacher_decision = static_cast<int>(r.integer("teacher_decision"));
        ex.ground_truth = static_cast<int>(r.integer("ground_truth"));
        if (ex.context_length < 0 || ex.context_length >= static_cast<int>(ex.prefix.size())) {
          r.fail("field 'context_length' out of range");
        }
        corpus.examples.push_back(std::move(ex));
      },
      &header);
  corpus.kept = header.value("kept", 0);
  corpus.rejected = header.value("rejected", 0);
  return corpus;
}

}  // namespace plrank
