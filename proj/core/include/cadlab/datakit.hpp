#pragma once

// Counterfactual pairs, JSONL interchange, bag-of-words featurization,
// environment partitioning and the synthetic CAD generator.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "cadlab/config_file.hpp"

namespace cadlab::data {

enum class Variant { Original, Counterfactual };
/// e_ori / e_CAD.
enum class Environment { Original, Counterfactual };

std::string_view to_string(Variant v) noexcept;
std::string_view to_string(Environment e) noexcept;

/// Per-example token annotations carried by synthetic data.
struct TokenGroups {
  std::vector<std::string> edited;
  std::vector<std::string> nonedited;
  std::vector<std::string> correlated;

  bool operator==(const TokenGroups&) const = default;
};

struct Example {
  std::string id;
  std::vector<std::string> tokens;
  int label = 0;
  std::string pair_id;
  Variant variant = Variant::Original;
  Environment env = Environment::Original;
  std::optional<TokenGroups> groups;

  bool operator==(const Example&) const = default;
};

struct Pair {
  Example original;
  Example counterfactual;
};

/// Vocabulary-level partition of the generator's tokens.
struct FeatureGroups {
  std::set<std::string> edited_causal;
  std::set<std::string> nonedited_causal;
  std::set<std::string> correlated;
  std::set<std::string> noise;

  bool operator==(const FeatureGroups&) const = default;
};

enum class GroupKind { EditedCausal, NoneditedCausal, Correlated };
inline constexpr GroupKind kProbeGroups[] = {
    GroupKind::EditedCausal, GroupKind::NoneditedCausal, GroupKind::Correlated};
std::string_view to_string(GroupKind g) noexcept;
const std::set<std::string>& members(const FeatureGroups& groups, GroupKind g);

std::vector<std::string> split_tokens(std::string_view text);
std::string join_tokens(const std::vector<std::string>& tokens);

// ---------------------------------------------------------------------------
// JSONL

struct LoadOptions {
  /// Training files must consist of complete original/counterfactual pairs;
  /// evaluation splits are unpaired.
  bool require_pairs = true;
};

/// Parses and validates a JSONL file. Errors carry the line number or the
/// offending pair_id.
std::vector<Example> load_jsonl(const std::filesystem::path& path,
                                LoadOptions options = {});
std::vector<Example> parse_jsonl(std::string_view text, LoadOptions options = {});

std::string to_jsonl(const std::vector<Example>& examples);
void write_jsonl(const std::filesystem::path& path,
                 const std::vector<Example>& examples);

/// Groups validated examples into pairs ordered by first appearance.
std::vector<Pair> make_pairs(const std::vector<Example>& examples);
std::vector<Example> flatten(const std::vector<Pair>& pairs);

std::string groups_to_json(const FeatureGroups& groups);
FeatureGroups load_groups(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Featurization

/// Token -> index map. Indices follow sorted token order; the OOV bucket is
/// the last index.
class Vocabulary {
 public:
  Vocabulary() = default;
  explicit Vocabulary(std::vector<std::string> tokens);

  static Vocabulary build(const std::vector<Example>& training);

  /// Feature dimension V, including the OOV bucket.
  std::size_t size() const noexcept { return tokens_.size() + 1; }
  std::size_t oov_index() const noexcept { return tokens_.size(); }
  std::size_t index_of(const std::string& token) const;
  const std::vector<std::string>& tokens() const noexcept { return tokens_; }

  bool operator==(const Vocabulary& o) const { return tokens_ == o.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::map<std::string, std::size_t> index_;
};

/// L1-normalized token counts of dimension vocab.size(); zero for no tokens.
using FeatureVector = std::vector<double>;

FeatureVector featurize(const std::vector<std::string>& tokens,
                        const Vocabulary& vocab);

/// Same, with every token in `masked` removed first.
FeatureVector featurize_masked(const std::vector<std::string>& tokens,
                               const Vocabulary& vocab,
                               const std::set<std::string>& masked);

// ---------------------------------------------------------------------------
// Environments

enum class EnvironmentScheme {
  /// e_ori = originals, e_CAD = counterfactuals.
  Disjoint,
  /// e_ori = originals, e_CAD = originals and counterfactuals.
  CadIncludesOriginals,
};

struct EnvironmentPartition {
  std::map<Environment, std::vector<std::size_t>> members;  // indices
};

/// Throws ValidationError if an environment is empty while alpha > 0.
EnvironmentPartition partition_environments(
    const std::vector<Example>& examples, double alpha,
    EnvironmentScheme scheme = EnvironmentScheme::Disjoint);

// ---------------------------------------------------------------------------
// Synthetic CAD generator

struct TokensPerGroup {
  std::size_t edited = 6;
  std::size_t nonedited = 6;
  std::size_t correlated = 6;
  std::size_t noise = 12;
};

struct GeneratorConfig {
  std::size_t n_pairs = 2000;
  std::size_t n_classes = 2;
  /// Vocabulary tokens per group, per class (noise is shared by all classes).
  TokensPerGroup tokens_per_group;
  double rho_train = 0.9;
  /// Defaults to 1 - rho_train when unset.
  std::optional<double> rho_ood;
  double edit_scope = 0.5;
  std::size_t sentence_length = 10;
  /// Causal and correlated token slots per sentence; the rest is noise.
  std::size_t causal_per_sentence = 4;
  std::size_t correlated_per_sentence = 2;
  /// Examples per OOD split; 0 means n_pairs.
  std::size_t ood_size = 0;
  std::uint64_t seed = 42;

  double effective_rho_ood() const { return rho_ood.value_or(1.0 - rho_train); }
  std::size_t edited_per_sentence() const;
  std::size_t effective_ood_size() const { return ood_size ? ood_size : n_pairs; }

  /// Throws ValidationError on invariant violations.
  void validate() const;

  static GeneratorConfig from_doc(const KeyValueDoc& doc, bool strict = true);
  KeyValueDoc to_doc() const;
  static const std::set<std::string>& keys();
};

struct GeneratedData {
  std::vector<Pair> train;
  /// Correlation drawn with rho_ood.
  std::vector<Example> ood_shift;
  /// ood_shift with edited-causal tokens removed.
  std::vector<Example> ood_stress;
  FeatureGroups groups;
};

GeneratedData generate_cad(const GeneratorConfig& config);

/// Writes train.jsonl, ood_shift.jsonl, ood_stress.jsonl, groups.json and
/// generator.cfg into `dir`.
void write_generated(const GeneratedData& data, const GeneratorConfig& config,
                     const std::filesystem::path& dir);

}  // namespace cadlab::data
