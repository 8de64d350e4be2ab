# Package marker for app.modules
