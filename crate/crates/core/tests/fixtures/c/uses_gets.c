#include <stdio.h>

char *gets(char *s);

int main(void) {
    char buf[32];
    gets(buf);
    puts(buf);
    return 0;
}
