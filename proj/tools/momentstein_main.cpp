#include "momentstein/measures.hpp"
int main() { return 0; }
