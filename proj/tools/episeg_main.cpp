#include "episeg/crossval.hpp"
#include "episeg/gradcheck.hpp"
int main(){return 0;}
