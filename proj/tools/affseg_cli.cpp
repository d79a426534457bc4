#include <cstdio>
int main() { std::puts("affseg: placeholder"); return 0; }
