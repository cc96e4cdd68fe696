#include "cadlab/datakit.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <unordered_map>

#include <json.hpp>

#include "cadlab/errors.hpp"
#include "cadlab/random.hpp"

namespace cadlab::data {

using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

std::string_view to_string(Variant v) noexcept {
  return v == Variant::Original ? "original" : "counterfactual";
}

std::string_view to_string(Environment e) noexcept {
  return e == Environment::Original ? "e_ori" : "e_CAD";
}

std::string_view to_string(GroupKind g) noexcept {
  switch (g) {
    case GroupKind::EditedCausal: return "edited_causal";
    case GroupKind::NoneditedCausal: return "nonedited_causal";
    case GroupKind::Correlated: return "correlated";
  }
  return "?";
}

const std::set<std::string>& members(const FeatureGroups& groups, GroupKind g) {
  switch (g) {
    case GroupKind::EditedCausal: return groups.edited_causal;
    case GroupKind::NoneditedCausal: return groups.nonedited_causal;
    case GroupKind::Correlated: return groups.correlated;
  }
  return groups.noise;
}

std::vector<std::string> split_tokens(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    const std::size_t start = i;
    while (i < text.size() && !std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    if (i > start) out.emplace_back(text.substr(start, i - start));
  }
  return out;
}

std::string join_tokens(const std::vector<std::string>& tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += tokens[i];
  }
  return out;
}

// ---------------------------------------------------------------------------
// JSONL

namespace {

std::vector<std::string> string_list(const json& j, const std::string& where) {
  if (!j.is_array()) throw ValidationError(where + ": expected a string array");
  std::vector<std::string> out;
  for (const auto& item : j) {
    if (!item.is_string()) throw ValidationError(where + ": expected strings");
    out.push_back(item.get<std::string>());
  }
  return out;
}

Example parse_example(const json& j, std::size_t line_no) {
  const std::string where = "line " + std::to_string(line_no);
  if (!j.is_object()) throw ValidationError(where + ": expected a JSON object");
  auto field = [&](const char* name) -> const json& {
    const auto it = j.find(name);
    if (it == j.end()) {
      throw ValidationError(where + ": missing field '" + name + "'");
    }
    return *it;
  };
  auto string_field = [&](const char* name) {
    const json& v = field(name);
    if (!v.is_string()) {
      throw ValidationError(where + ": field '" + std::string(name) +
                            "' must be a string");
    }
    return v.get<std::string>();
  };

  Example ex;
  ex.id = string_field("id");
  ex.tokens = split_tokens(string_field("text"));
  const json& label = field("label");
  if (!label.is_number_integer() || label.get<std::int64_t>() < 0) {
    throw ValidationError(where + ": field 'label' must be a non-negative integer");
  }
  ex.label = label.get<int>();
  ex.pair_id = string_field("pair_id");
  const std::string variant = string_field("variant");
  if (variant == "original") {
    ex.variant = Variant::Original;
    ex.env = Environment::Original;
  } else if (variant == "counterfactual") {
    ex.variant = Variant::Counterfactual;
    ex.env = Environment::Counterfactual;
  } else {
    throw ValidationError(where + ": unknown variant '" + variant + "'");
  }
  if (const auto it = j.find("groups"); it != j.end()) {
    if (!it->is_object()) throw ValidationError(where + ": 'groups' must be an object");
    TokenGroups g;
    if (it->contains("edited")) g.edited = string_list(it->at("edited"), where);
    if (it->contains("nonedited")) g.nonedited = string_list(it->at("nonedited"), where);
    if (it->contains("correlated")) g.correlated = string_list(it->at("correlated"), where);
    ex.groups = std::move(g);
  }
  return ex;
}

void validate_pairs(const std::vector<Example>& examples) {
  std::map<std::string, std::vector<const Example*>> by_pair;
  for (const Example& ex : examples) by_pair[ex.pair_id].push_back(&ex);
  for (const auto& [pair_id, members] : by_pair) {
    if (members.size() != 2) {
      throw ValidationError("pair '" + pair_id + "' has " +
                            std::to_string(members.size()) +
                            " member(s), expected 2");
    }
    if (members[0]->variant == members[1]->variant) {
      throw ValidationError("pair '" + pair_id +
                            "' needs one original and one counterfactual");
    }
    if (members[0]->label == members[1]->label) {
      throw ValidationError("pair '" + pair_id + "' does not flip the label");
    }
  }
}

}  // namespace

std::vector<Example> parse_jsonl(std::string_view text, LoadOptions options) {
  std::vector<Example> out;
  std::size_t line_no = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ValidationError("line " + std::to_string(line_no) +
                            ": JSON parse error: " + e.what());
    }
    out.push_back(parse_example(j, line_no));
  }
  if (options.require_pairs) validate_pairs(out);
  return out;
}

std::vector<Example> load_jsonl(const std::filesystem::path& path,
                                LoadOptions options) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_jsonl(buf.str(), options);
}

std::string to_jsonl(const std::vector<Example>& examples) {
  std::string out;
  for (const Example& ex : examples) {
    ordered_json j;
    j["id"] = ex.id;
    j["text"] = join_tokens(ex.tokens);
    j["label"] = ex.label;
    j["pair_id"] = ex.pair_id;
    j["variant"] = std::string(to_string(ex.variant));
    if (ex.groups) {
      j["groups"] = {{"edited", ex.groups->edited},
                     {"nonedited", ex.groups->nonedited},
                     {"correlated", ex.groups->correlated}};
    }
    out += j.dump();
    out += '\n';
  }
  return out;
}

void write_jsonl(const std::filesystem::path& path,
                 const std::vector<Example>& examples) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << to_jsonl(examples);
}

std::vector<Pair> make_pairs(const std::vector<Example>& examples) {
  validate_pairs(examples);
  std::vector<std::string> order;
  std::unordered_map<std::string, Pair> by_id;
  for (const Example& ex : examples) {
    auto [it, inserted] = by_id.try_emplace(ex.pair_id);
    if (inserted) order.push_back(ex.pair_id);
    (ex.variant == Variant::Original ? it->second.original
                                     : it->second.counterfactual) = ex;
  }
  std::vector<Pair> pairs;
  pairs.reserve(order.size());
  for (const std::string& id : order) pairs.push_back(std::move(by_id[id]));
  return pairs;
}

std::vector<Example> flatten(const std::vector<Pair>& pairs) {
  std::vector<Example> out;
  out.reserve(pairs.size() * 2);
  for (const Pair& p : pairs) {
    out.push_back(p.original);
    out.push_back(p.counterfactual);
  }
  return out;
}

std::string groups_to_json(const FeatureGroups& groups) {
  ordered_json j;
  j["edited_causal"] = groups.edited_causal;
  j["nonedited_causal"] = groups.nonedited_causal;
  j["correlated"] = groups.correlated;
  j["noise"] = groups.noise;
  return j.dump(2) + "\n";
}

FeatureGroups load_groups(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
  FeatureGroups g;
  auto read = [&](const char* key, std::set<std::string>& into) {
    if (!j.contains(key)) {
      throw ValidationError(path.string() + ": missing group '" + key + "'");
    }
    for (const auto& t : string_list(j.at(key), path.string())) into.insert(t);
  };
  read("edited_causal", g.edited_causal);
  read("nonedited_causal", g.nonedited_causal);
  read("correlated", g.correlated);
  if (j.contains("noise")) read("noise", g.noise);
  return g;
}

// ---------------------------------------------------------------------------
// Featurization

Vocabulary::Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  std::sort(tokens_.begin(), tokens_.end());
  tokens_.erase(std::unique(tokens_.begin(), tokens_.end()), tokens_.end());
  for (std::size_t i = 0; i < tokens_.size(); ++i) index_.emplace(tokens_[i], i);
}

Vocabulary Vocabulary::build(const std::vector<Example>& training) {
  std::vector<std::string> all;
  for (const Example& ex : training) {
    all.insert(all.end(), ex.tokens.begin(), ex.tokens.end());
  }
  return Vocabulary(std::move(all));
}

std::size_t Vocabulary::index_of(const std::string& token) const {
  const auto it = index_.find(token);
  return it == index_.end() ? oov_index() : it->second;
}

FeatureVector featurize(const std::vector<std::string>& tokens,
                        const Vocabulary& vocab) {
  static const std::set<std::string> kNothing;
  return featurize_masked(tokens, vocab, kNothing);
}

FeatureVector featurize_masked(const std::vector<std::string>& tokens,
                               const Vocabulary& vocab,
                               const std::set<std::string>& masked) {
  FeatureVector x(vocab.size(), 0.0);
  std::size_t kept = 0;
  for (const std::string& t : tokens) {
    if (masked.count(t)) continue;
    x[vocab.index_of(t)] += 1.0;
    ++kept;
  }
  if (kept == 0) return x;
  const double inv = 1.0 / static_cast<double>(kept);
  for (double& v : x) v *= inv;
  return x;
}

// ---------------------------------------------------------------------------
// Environments

EnvironmentPartition partition_environments(const std::vector<Example>& examples,
                                            double alpha,
                                            EnvironmentScheme scheme) {
  EnvironmentPartition part;
  auto& ori = part.members[Environment::Original];
  auto& cad = part.members[Environment::Counterfactual];
  for (std::size_t i = 0; i < examples.size(); ++i) {
    if (examples[i].variant == Variant::Original) {
      ori.push_back(i);
      if (scheme == EnvironmentScheme::CadIncludesOriginals) cad.push_back(i);
    } else {
      cad.push_back(i);
    }
  }
  if (alpha > 0.0) {
    if (ori.empty()) {
      throw ValidationError("environment e_ori is empty but the IRM weight is positive");
    }
    if (cad.empty() ||
        (scheme == EnvironmentScheme::CadIncludesOriginals && cad.size() == ori.size())) {
      throw ValidationError("environment e_CAD is empty but the IRM weight is positive");
    }
  }
  return part;
}

// ---------------------------------------------------------------------------
// Generator

std::size_t GeneratorConfig::edited_per_sentence() const {
  if (causal_per_sentence <= 1) return causal_per_sentence;
  const auto raw = static_cast<std::size_t>(
      std::llround(edit_scope * static_cast<double>(causal_per_sentence)));
  return std::clamp<std::size_t>(raw, 1, causal_per_sentence - 1);
}

void GeneratorConfig::validate() const {
  auto fail = [](const std::string& msg) {
    throw ValidationError("generator config: " + msg);
  };
  if (n_pairs < 1) fail("n_pairs must be >= 1");
  if (n_classes < 2) fail("n_classes must be >= 2 for label-flipping pairs");
  if (!(rho_train >= 0.0 && rho_train <= 1.0)) fail("rho_train must lie in [0,1]");
  const double ood = effective_rho_ood();
  if (!(ood >= 0.0 && ood <= 1.0)) fail("rho_ood must lie in [0,1]");
  if (!(edit_scope > 0.0 && edit_scope < 1.0)) fail("edit_scope must lie in (0,1)");
  if (causal_per_sentence < 1) fail("causal_per_sentence must be >= 1");
  if (sentence_length < causal_per_sentence + correlated_per_sentence) {
    fail("sentence_length is shorter than the causal and correlated slots");
  }
  if (tokens_per_group.edited < 1) fail("tokens_per_group.edited must be >= 1");
  if (causal_per_sentence > edited_per_sentence() && tokens_per_group.nonedited < 1) {
    fail("tokens_per_group.nonedited must be >= 1");
  }
  if (correlated_per_sentence > 0 && tokens_per_group.correlated < 1) {
    fail("tokens_per_group.correlated must be >= 1");
  }
  if (sentence_length > causal_per_sentence + correlated_per_sentence &&
      tokens_per_group.noise < 1) {
    fail("tokens_per_group.noise must be >= 1");
  }
}

namespace {

const std::set<std::string> kGeneratorKeys = {
    "n_pairs", "n_classes", "tokens_per_group.edited",
    "tokens_per_group.nonedited", "tokens_per_group.correlated",
    "tokens_per_group.noise", "rho_train", "rho_ood", "edit_scope",
    "sentence_length", "causal_per_sentence", "correlated_per_sentence",
    "ood_size", "seed"};

std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

const std::set<std::string>& GeneratorConfig::keys() { return kGeneratorKeys; }

GeneratorConfig GeneratorConfig::from_doc(const KeyValueDoc& doc, bool strict) {
  if (strict) doc.require_known(kGeneratorKeys);
  GeneratorConfig c;
  auto count = [&](const char* key, std::size_t fallback) {
    const std::int64_t v = doc.get_int(key, static_cast<std::int64_t>(fallback));
    if (v < 0) throw ValidationError(std::string("config: '") + key + "' must be >= 0");
    return static_cast<std::size_t>(v);
  };
  c.n_pairs = count("n_pairs", c.n_pairs);
  c.n_classes = count("n_classes", c.n_classes);
  c.tokens_per_group.edited = count("tokens_per_group.edited", c.tokens_per_group.edited);
  c.tokens_per_group.nonedited =
      count("tokens_per_group.nonedited", c.tokens_per_group.nonedited);
  c.tokens_per_group.correlated =
      count("tokens_per_group.correlated", c.tokens_per_group.correlated);
  c.tokens_per_group.noise = count("tokens_per_group.noise", c.tokens_per_group.noise);
  c.rho_train = doc.get_double("rho_train", c.rho_train);
  if (doc.has("rho_ood")) c.rho_ood = doc.get_double("rho_ood", 0.0);
  c.edit_scope = doc.get_double("edit_scope", c.edit_scope);
  c.sentence_length = count("sentence_length", c.sentence_length);
  c.causal_per_sentence = count("causal_per_sentence", c.causal_per_sentence);
  c.correlated_per_sentence = count("correlated_per_sentence", c.correlated_per_sentence);
  c.ood_size = count("ood_size", c.ood_size);
  c.seed = doc.get_uint("seed", c.seed);
  c.validate();
  return c;
}

KeyValueDoc GeneratorConfig::to_doc() const {
  KeyValueDoc doc;
  doc.set("n_pairs", std::to_string(n_pairs));
  doc.set("n_classes", std::to_string(n_classes));
  doc.set("tokens_per_group.edited", std::to_string(tokens_per_group.edited));
  doc.set("tokens_per_group.nonedited", std::to_string(tokens_per_group.nonedited));
  doc.set("tokens_per_group.correlated", std::to_string(tokens_per_group.correlated));
  doc.set("tokens_per_group.noise", std::to_string(tokens_per_group.noise));
  doc.set("rho_train", format_double(rho_train));
  doc.set("rho_ood", format_double(effective_rho_ood()));
  doc.set("edit_scope", format_double(edit_scope));
  doc.set("sentence_length", std::to_string(sentence_length));
  doc.set("causal_per_sentence", std::to_string(causal_per_sentence));
  doc.set("correlated_per_sentence", std::to_string(correlated_per_sentence));
  doc.set("ood_size", std::to_string(ood_size));
  doc.set("seed", std::to_string(seed));
  return doc;
}

namespace {

enum class Slot { Edited, Nonedited, Correlated, Noise };

std::string pool_token(char group, std::size_t cls, std::size_t i) {
  return std::string(1, group) + std::to_string(cls) + "_" + std::to_string(i);
}

std::string noise_token(std::size_t i) { return "n_" + std::to_string(i); }

class SentenceSampler {
 public:
  SentenceSampler(const GeneratorConfig& c, Rng& rng) : c_(c), rng_(rng) {}

  std::string draw(char group, std::size_t cls, std::size_t pool) {
    return pool_token(group, cls, rng_.index(pool));
  }

  std::size_t correlated_class(std::size_t label, double rho) {
    if (rng_.uniform() < rho) return label;
    const std::size_t other = rng_.index(c_.n_classes - 1);
    return other >= label ? other + 1 : other;
  }

  /// Slot layout and tokens of an original sentence for `label`.
  std::pair<std::vector<Slot>, std::vector<std::string>> sentence(std::size_t label,
                                                                  double rho) {
    const std::size_t n_edit = c_.edited_per_sentence();
    const std::size_t n_causal = c_.causal_per_sentence;
    const std::size_t n_corr = c_.correlated_per_sentence;
    std::vector<Slot> slots;
    slots.insert(slots.end(), n_edit, Slot::Edited);
    slots.insert(slots.end(), n_causal - n_edit, Slot::Nonedited);
    slots.insert(slots.end(), n_corr, Slot::Correlated);
    slots.insert(slots.end(), c_.sentence_length - n_causal - n_corr, Slot::Noise);
    rng_.shuffle(slots);

    const std::size_t corr_cls = correlated_class(label, rho);
    const TokensPerGroup& k = c_.tokens_per_group;
    std::vector<std::string> tokens;
    tokens.reserve(slots.size());
    for (Slot s : slots) {
      switch (s) {
        case Slot::Edited: tokens.push_back(draw('e', label, k.edited)); break;
        case Slot::Nonedited: tokens.push_back(draw('u', label, k.nonedited)); break;
        case Slot::Correlated: tokens.push_back(draw('r', corr_cls, k.correlated)); break;
        case Slot::Noise: tokens.push_back(noise_token(rng_.index(k.noise))); break;
      }
    }
    return {std::move(slots), std::move(tokens)};
  }

 private:
  const GeneratorConfig& c_;
  Rng& rng_;
};

TokenGroups annotate(const std::vector<Slot>& slots,
                     const std::vector<std::string>& tokens) {
  TokenGroups g;
  for (std::size_t i = 0; i < slots.size(); ++i) {
    if (slots[i] == Slot::Edited) g.edited.push_back(tokens[i]);
    if (slots[i] == Slot::Nonedited) g.nonedited.push_back(tokens[i]);
    if (slots[i] == Slot::Correlated) g.correlated.push_back(tokens[i]);
  }
  return g;
}

std::string numbered(const char* prefix, std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s%06zu", prefix, i);
  return buf;
}

}  // namespace

GeneratedData generate_cad(const GeneratorConfig& config) {
  config.validate();
  GeneratedData out;

  const TokensPerGroup& k = config.tokens_per_group;
  for (std::size_t cls = 0; cls < config.n_classes; ++cls) {
    for (std::size_t i = 0; i < k.edited; ++i)
      out.groups.edited_causal.insert(pool_token('e', cls, i));
    for (std::size_t i = 0; i < k.nonedited; ++i)
      out.groups.nonedited_causal.insert(pool_token('u', cls, i));
    for (std::size_t i = 0; i < k.correlated; ++i)
      out.groups.correlated.insert(pool_token('r', cls, i));
  }
  for (std::size_t i = 0; i < k.noise; ++i) out.groups.noise.insert(noise_token(i));

  Rng train_rng(derive_seed(config.seed, 0));
  SentenceSampler train_sampler(config, train_rng);
  out.train.reserve(config.n_pairs);
  for (std::size_t i = 0; i < config.n_pairs; ++i) {
    const std::size_t label = i % config.n_classes;
    // Cycling the flipped label keeps counterfactual classes balanced too.
    const std::size_t flipped = (label + 1) % config.n_classes;
    auto [slots, tokens] = train_sampler.sentence(label, config.rho_train);

    std::vector<std::string> edited = tokens;
    for (std::size_t s = 0; s < slots.size(); ++s) {
      if (slots[s] == Slot::Edited) edited[s] = train_sampler.draw('e', flipped, k.edited);
    }

    Pair p;
    const std::string pair_id = numbered("p", i);
    p.original.id = pair_id + "-o";
    p.original.pair_id = pair_id;
    p.original.label = static_cast<int>(label);
    p.original.variant = Variant::Original;
    p.original.env = Environment::Original;
    p.original.groups = annotate(slots, tokens);
    p.original.tokens = std::move(tokens);

    p.counterfactual.id = pair_id + "-c";
    p.counterfactual.pair_id = pair_id;
    p.counterfactual.label = static_cast<int>(flipped);
    p.counterfactual.variant = Variant::Counterfactual;
    p.counterfactual.env = Environment::Counterfactual;
    p.counterfactual.groups = annotate(slots, edited);
    p.counterfactual.tokens = std::move(edited);
    out.train.push_back(std::move(p));
  }

  Rng ood_rng(derive_seed(config.seed, 1));
  SentenceSampler ood_sampler(config, ood_rng);
  const std::size_t n_ood = config.effective_ood_size();
  out.ood_shift.reserve(n_ood);
  out.ood_stress.reserve(n_ood);
  for (std::size_t i = 0; i < n_ood; ++i) {
    const std::size_t label = i % config.n_classes;
    auto [slots, tokens] = ood_sampler.sentence(label, config.effective_rho_ood());

    Example shift;
    shift.id = numbered("shift-", i);
    shift.pair_id = shift.id;
    shift.label = static_cast<int>(label);
    shift.groups = annotate(slots, tokens);

    Example stress;
    stress.id = numbered("stress-", i);
    stress.pair_id = stress.id;
    stress.label = static_cast<int>(label);
    std::vector<Slot> kept_slots;
    for (std::size_t s = 0; s < slots.size(); ++s) {
      if (slots[s] == Slot::Edited) continue;
      kept_slots.push_back(slots[s]);
      stress.tokens.push_back(tokens[s]);
    }
    stress.groups = annotate(kept_slots, stress.tokens);

    shift.tokens = std::move(tokens);
    out.ood_shift.push_back(std::move(shift));
    out.ood_stress.push_back(std::move(stress));
  }
  return out;
}

void write_generated(const GeneratedData& data, const GeneratorConfig& config,
                     const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_jsonl(dir / "train.jsonl", flatten(data.train));
  write_jsonl(dir / "ood_shift.jsonl", data.ood_shift);
  write_jsonl(dir / "ood_stress.jsonl", data.ood_stress);
  {
    std::ofstream g(dir / "groups.json", std::ios::binary);
    g << groups_to_json(data.groups);
  }
  std::ofstream cfg(dir / "generator.cfg", std::ios::binary);
  cfg << config.to_doc().canonical();
}

}  // namespace cadlab::data
