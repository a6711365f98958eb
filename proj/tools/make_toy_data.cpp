// Writes the toy corpus splits and the matching lexicon.
#include <fstream>
#include <iostream>

#include "knowfree/testing/toy_corpus.hpp"

int main(int argc, char** argv) {
  if (argc != 2) {
    std::cerr << "usage: make_toy_data <output dir>\n";
    return 2;
  }
  const std::filesystem::path dir = argv[1];
  std::filesystem::create_directories(dir);
  knowfree::save_jsonl(dir / "train.jsonl", knowfree::testing::generate_toy_corpus(30, 1));
  knowfree::save_jsonl(dir / "test.jsonl", knowfree::testing::generate_toy_corpus(10, 2));
  std::ofstream(dir / "lexicon.json") << knowfree::testing::toy_lexicon().to_json().dump(2) << '\n';
  return 0;
}
