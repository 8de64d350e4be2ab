# Package marker for app
