#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace bq2 {

enum class TaskKind { mc, gen };

// One evaluation item. `task` names the family the item is reported under.
struct ToyTask {
  std::string id;
  std::string task;
  TaskKind kind = TaskKind::mc;
  std::string context;
  // mc
  std::vector<std::string> options;
  int gold = 0;
  // gen
  std::string target;
  std::string until;  // stop string, excluded from the output; empty = none
  std::string regex;  // when set, the first match is compared instead of the trimmed text
  int max_tokens = 48;

  // Throws TaskFormatError on malformed items (too few options, bad gold
  // index, invalid regex).
  void validate() const;
};

std::string to_json_line(const ToyTask& task);
ToyTask parse_task_line(const std::string& line);

void write_tasks(const std::filesystem::path& path, const std::vector<ToyTask>& tasks);
std::vector<ToyTask> read_tasks(const std::filesystem::path& path);

}  // namespace bq2
