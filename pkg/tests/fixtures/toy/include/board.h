#ifndef BOARD_H
#define BOARD_H

#define LED_RED 13
#define LED_GREEN 14

void board_init(void);
void led_toggle(int pin);

#endif
