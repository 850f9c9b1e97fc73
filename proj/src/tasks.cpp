#include "bq2/tasks.hpp"

#include "bq2/errors.hpp"

#include <json.hpp>

#include <fstream>
#include <regex>

namespace bq2 {

using nlohmann::json;

void ToyTask::validate() const {
  if (kind == TaskKind::mc) {
    if (options.size() < 2) throw TaskFormatError("task " + id + ": multiple-choice item needs at least 2 options");
    if (gold < 0 || gold >= static_cast<int>(options.size())) throw TaskFormatError("task " + id + ": gold index out of range");
  } else {
    if (max_tokens < 0) throw TaskFormatError("task " + id + ": negative generation budget");
    if (!regex.empty()) {
      try {
        std::regex re(regex);
      } catch (const std::regex_error& e) {
        throw TaskFormatError("task " + id + ": invalid regex '" + regex + "': " + e.what());
      }
    }
  }
}

std::string to_json_line(const ToyTask& t) {
  json j;
  j["id"] = t.id;
  j["task"] = t.task;
  j["kind"] = t.kind == TaskKind::mc ? "mc" : "gen";
  j["context"] = t.context;
  if (t.kind == TaskKind::mc) {
    j["options"] = t.options;
    j["gold"] = t.gold;
  } else {
    j["target"] = t.target;
    j["until"] = t.until;
    j["regex"] = t.regex;
    j["max_tokens"] = t.max_tokens;
  }
  return j.dump();
}

ToyTask parse_task_line(const std::string& line) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::exception& e) {
    throw TaskFormatError(std::string("task line is not valid JSON: ") + e.what());
  }
  ToyTask t;
  try {
    t.id = j.at("id").get<std::string>();
    t.task = j.value("task", t.id);
    const std::string kind = j.at("kind").get<std::string>();
    if (kind == "mc") {
      t.kind = TaskKind::mc;
    } else if (kind == "gen") {
      t.kind = TaskKind::gen;
    } else {
      throw TaskFormatError("task " + t.id + ": unknown kind '" + kind + "'");
    }
    t.context = j.at("context").get<std::string>();
    if (t.kind == TaskKind::mc) {
      t.options = j.at("options").get<std::vector<std::string>>();
      t.gold = j.at("gold").get<int>();
    } else {
      t.target = j.at("target").get<std::string>();
      t.until = j.value("until", std::string{});
      t.regex = j.value("regex", std::string{});
      t.max_tokens = j.value("max_tokens", 48);
    }
  } catch (const json::exception& e) {
    throw TaskFormatError(std::string("malformed task: ") + e.what());
  }
  t.validate();
  return t;
}

void write_tasks(const std::filesystem::path& path, const std::vector<ToyTask>& tasks) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write task file " + path.string());
  for (const auto& t : tasks) out << to_json_line(t) << '\n';
}

std::vector<ToyTask> read_tasks(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read task file " + path.string());
  std::vector<ToyTask> tasks;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    tasks.push_back(parse_task_line(line));
  }
  return tasks;
}

}  // namespace bq2
